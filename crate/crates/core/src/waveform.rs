//! Piecewise-linear waveforms with optional jumps.
//!
//! A waveform is a list of `(time, value)` breakpoints with non-decreasing
//! times, linear in between. Two consecutive points with the same time encode
//! a step (left value, then right value). Outside the breakpoint span the
//! waveform is zero.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    points: Vec<(f64, f64)>,
}

impl Waveform {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds a waveform from breakpoints.
    ///
    /// # Panics
    /// If the times are not non-decreasing.
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        assert!(
            points.windows(2).all(|w| w[0].0 <= w[1].0),
            "waveform breakpoints must be time-ordered"
        );
        Self { points }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }

    /// Exact integral over the whole support.
    pub fn integral(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum()
    }

    /// Exact integral of the squared waveform.
    pub fn integral_of_square(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].1, w[1].1);
                (w[1].0 - w[0].0) * (a * a + a * b + b * b) / 3.0
            })
            .sum()
    }

    /// Left limit at `t`.
    pub fn value_before(&self, t: f64) -> f64 {
        self.points
            .windows(2)
            .rev()
            .find(|w| w[0].0 < w[1].0 && w[0].0 < t && t <= w[1].0)
            .map_or(0.0, |w| lerp(w[0], w[1], t))
    }

    /// Right limit at `t`.
    pub fn value_after(&self, t: f64) -> f64 {
        self.points
            .windows(2)
            .find(|w| w[0].0 < w[1].0 && w[0].0 <= t && t < w[1].0)
            .map_or(0.0, |w| lerp(w[0], w[1], t))
    }

    pub fn min_value(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(t, v)| (t, k * v)).collect(),
        }
    }

    /// Pointwise sum of `parts`. The result has a breakpoint at every
    /// breakpoint time of every input, and a step wherever any input steps.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a Waveform>) -> Self {
        let parts: Vec<&Waveform> = parts.into_iter().collect();
        let mut times: Vec<f64> = parts
            .iter()
            .flat_map(|w| w.points.iter().map(|p| p.0))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();

        let mut points = Vec::with_capacity(times.len() + 4);
        let (first, last) = match (times.first(), times.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Self::zero(),
        };
        for &t in &times {
            let left: f64 = if t == first {
                parts.iter().map(|w| w.start_value_at(t)).sum()
            } else {
                parts.iter().map(|w| w.value_before(t)).sum()
            };
            let right: f64 = if t == last {
                parts.iter().map(|w| w.end_value_at(t)).sum()
            } else {
                parts.iter().map(|w| w.value_after(t)).sum()
            };
            points.push((t, left));
            if right != left {
                points.push((t, right));
            }
        }
        Self { points }
    }

    /// Value at the start of the support if it begins at `t`, else the left limit.
    fn start_value_at(&self, t: f64) -> f64 {
        match self.points.first() {
            Some(&(t0, v0)) if t0 == t => v0,
            _ => self.value_before(t),
        }
    }

    fn end_value_at(&self, t: f64) -> f64 {
        match self.points.last() {
            Some(&(tn, vn)) if tn == t => vn,
            _ => self.value_after(t),
        }
    }
}

fn lerp(a: (f64, f64), b: (f64, f64), t: f64) -> f64 {
    let s = (t - a.0) / (b.0 - a.0);
    a.1 + s * (b.1 - a.1)
}
