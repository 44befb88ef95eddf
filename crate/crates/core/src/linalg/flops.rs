use std::cell::Cell;

/// Operation-count accumulator.
///
/// Convention: one multiply-add is two flops, so a product of an `a×b` and a
/// `b×c` matrix costs exactly `2·a·b·c`. Everything that is not a matrix
/// product (elementwise maps, reductions, softmax, layer norm) lands in
/// `other_flops` using small per-element constants; those counts are
/// indicative only.
#[derive(Debug, Default)]
pub struct FlopMeter {
    matmul: Cell<u64>,
    other: Cell<u64>,
}

/// A point-in-time reading of a [`FlopMeter`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub matmul: u64,
    pub other: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.other
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: FlopCount) -> FlopCount {
        FlopCount {
            matmul: self.matmul - earlier.matmul,
            other: self.other - earlier.other,
        }
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: Self) {
        self.matmul += rhs.matmul;
        self.other += rhs.other;
    }
}

impl FlopMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_matmul(&self, a: usize, b: usize, c: usize) {
        self.matmul
            .set(self.matmul.get() + 2 * (a as u64) * (b as u64) * (c as u64));
    }

    pub fn add_other(&self, n: usize) {
        self.other.set(self.other.get() + n as u64);
    }

    pub fn matmul_flops(&self) -> u64 {
        self.matmul.get()
    }

    pub fn other_flops(&self) -> u64 {
        self.other.get()
    }

    pub fn snapshot(&self) -> FlopCount {
        FlopCount {
            matmul: self.matmul.get(),
            other: self.other.get(),
        }
    }

    pub fn reset(&self) {
        self.matmul.set(0);
        self.other.set(0);
    }
}
