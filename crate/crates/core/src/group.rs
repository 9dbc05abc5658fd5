//! Cyclic rotation groups.

use crate::error::{Error, Result};

/// A cyclic rotation group C_N with N in {1, 4, 8}.
///
/// Orientation index `n` corresponds to a counterclockwise rotation by
/// `2*pi*n / N`; C1 is the trivial group (a conventional CNN), C4 rotates in
/// exact quarter turns, C8 adds 45-degree steps that require resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    order: usize,
}

impl GroupSpec {
    pub fn cyclic(order: usize) -> Result<Self> {
        match order {
            1 | 4 | 8 => Ok(GroupSpec { order }),
            _ => Err(Error::Config(format!(
                "group order {order} unsupported (choose 1, 4 or 8)"
            ))),
        }
    }

    pub fn trivial() -> Self {
        GroupSpec { order: 1 }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    /// Rotation angle of orientation `index`, in radians.
    pub fn angle(&self, index: usize) -> f64 {
        debug_assert!(index < self.order);
        std::f64::consts::TAU * index as f64 / self.order as f64
    }

    /// All group angles, strictly increasing in `[0, 2*pi)`.
    pub fn angles(&self) -> Vec<f64> {
        (0..self.order).map(|i| self.angle(i)).collect()
    }

    /// Resolve an angle (radians) to its orientation index, or error if it
    /// is not a group angle.
    pub fn index_of_angle(&self, angle: f64) -> Result<usize> {
        let tau = std::f64::consts::TAU;
        let wrapped = angle.rem_euclid(tau);
        let step = tau / self.order as f64;
        let idx = (wrapped / step).round() as usize % self.order;
        let nearest = idx as f64 * step;
        let dist = (wrapped - nearest).abs().min(tau - (wrapped - nearest).abs());
        if dist > 1e-9 {
            return Err(Error::Config(format!(
                "angle {angle} rad is not an element of C{}",
                self.order
            )));
        }
        Ok(idx)
    }

    /// Number of exact quarter turns for orientation `index`, if the angle
    /// is a multiple of 90 degrees.
    pub fn quarter_turns(&self, index: usize) -> Option<usize> {
        if (index * 4) % self.order == 0 {
            Some(index * 4 / self.order)
        } else {
            None
        }
    }
}
