use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

/// Tally of scalar operations executed by a pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub activation: u64,
    pub exp: u64,
    pub log: u64,
    pub add: u64,
    pub max: u64,
    pub mul: u64,
}

impl OpCount {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: Self) {
        self.activation += rhs.activation;
        self.exp += rhs.exp;
        self.log += rhs.log;
        self.add += rhs.add;
        self.max += rhs.max;
        self.mul += rhs.mul;
    }
}

impl Add for OpCount {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl Mul<u64> for OpCount {
    type Output = Self;
    fn mul(self, k: u64) -> Self {
        Self {
            activation: self.activation * k,
            exp: self.exp * k,
            log: self.log * k,
            add: self.add * k,
            max: self.max * k,
            mul: self.mul * k,
        }
    }
}
