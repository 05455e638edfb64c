//! The internal-state estimator: a bias-free gated MLP
//! `down(up(x) ⊙ SiLU(gate(x)))`, and a plain `down(SiLU(up(x)))` backbone
//! for comparison. Parameters are held in `f64`; the on-disk format stores
//! `f32`.

mod io;
mod net;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use io::{load_params, load_params_path, save_params, save_params_path, PROBE_MAGIC, PROBE_VERSION};
pub use net::{backward, forward, loss, predict, silu, silu_grad, ForwardCache, Gradients, Prediction, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Gated,
    Standard,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Backbone::Gated),
            "standard" => Ok(Backbone::Standard),
            _ => Err(Error::invalid(format!("backbone must be gated or standard, got {s:?}"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gated => "gated",
            Backbone::Standard => "standard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Regression,
}

impl Mode {
    pub fn output_dim(&self) -> usize {
        match self {
            Mode::Classification => 2,
            Mode::Regression => 1,
        }
    }

    pub fn from_output_dim(c: usize) -> Result<Self> {
        match c {
            2 => Ok(Mode::Classification),
            1 => Ok(Mode::Regression),
            _ => Err(Error::invalid(format!(
                "a probe with {c} outputs is neither a classifier nor a regressor"
            ))),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Mode::Classification),
            "reg" | "regression" => Ok(Mode::Regression),
            _ => Err(Error::invalid(format!("mode must be cls or reg, got {s:?}"))),
        }
    }
}

/// Names of the weight matrices, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weight {
    Gate,
    Up,
    Down,
}

impl Weight {
    pub fn name(&self) -> &'static str {
        match self {
            Weight::Gate => "gate",
            Weight::Up => "up",
            Weight::Down => "down",
        }
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Probe weights. `gate` and `up` are h×d, `down` is C×h.
#[derive(Debug, Clone)]
pub struct ProbeParams {
    backbone: Backbone,
    gate: Option<Matrix>,
    up: Matrix,
    down: Matrix,
    // Changes on every mutable access; a forward cache remembers it.
    stamp: u64,
}

impl PartialEq for ProbeParams {
    fn eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone
            && self.gate == other.gate
            && self.up == other.up
            && self.down == other.down
    }
}

impl ProbeParams {
    pub fn from_matrices(
        backbone: Backbone,
        gate: Option<Matrix>,
        up: Matrix,
        down: Matrix,
    ) -> Result<Self> {
        let (h, d) = up.shape();
        let (c, h2) = down.shape();
        if d == 0 || h == 0 || c == 0 {
            return Err(Error::Shape(format!("dimensions must be positive (d={d}, h={h}, C={c})")));
        }
        if h2 != h {
            return Err(Error::Shape(format!("down is {c}x{h2} but up has {h} rows")));
        }
        match (backbone, &gate) {
            (Backbone::Gated, Some(g)) if g.shape() != (h, d) => {
                return Err(Error::Shape(format!(
                    "gate is {}x{} but up is {h}x{d}",
                    g.rows(),
                    g.cols()
                )))
            }
            (Backbone::Gated, None) => {
                return Err(Error::Shape("gated backbone needs a gate matrix".into()))
            }
            (Backbone::Standard, Some(_)) => {
                return Err(Error::Shape("standard backbone has no gate matrix".into()))
            }
            _ => {}
        }
        let p = ProbeParams {
            backbone,
            gate,
            up,
            down,
            stamp: fresh_stamp(),
        };
        for (w, m) in p.matrices() {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("{} weights", w.name())));
            }
        }
        Ok(p)
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn input_dim(&self) -> usize {
        self.up.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.up.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.down.rows()
    }

    pub fn gate(&self) -> Option<&Matrix> {
        self.gate.as_ref()
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Weight matrices in storage order (gate first when present).
    pub fn matrices(&self) -> impl Iterator<Item = (Weight, &Matrix)> {
        self.gate
            .as_ref()
            .map(|g| (Weight::Gate, g))
            .into_iter()
            .chain([(Weight::Up, &self.up), (Weight::Down, &self.down)])
    }

    pub fn matrix(&self, w: Weight) -> Option<&Matrix> {
        match w {
            Weight::Gate => self.gate.as_ref(),
            Weight::Up => Some(&self.up),
            Weight::Down => Some(&self.down),
        }
    }

    /// Mutable access to one matrix. Invalidates outstanding forward caches.
    pub fn matrix_mut(&mut self, w: Weight) -> Option<&mut Matrix> {
        self.stamp = fresh_stamp();
        match w {
            Weight::Gate => self.gate.as_mut(),
            Weight::Up => Some(&mut self.up),
            Weight::Down => Some(&mut self.down),
        }
    }

    /// Bitwise equality including signed zeros.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone
            && self.matrices().count() == other.matrices().count()
            && self.matrices().zip(other.matrices()).all(|((wa, a), (wb, b))| {
                wa == wb
                    && a.shape() == b.shape()
                    && a.as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Training initialization: `gate` and `up` uniform in ±1/√d, `down` zero,
/// so an untrained probe outputs zero logits. Deterministic in `seed`.
pub fn init_params(d: usize, h: usize, c: usize, backbone: Backbone, seed: u64) -> Result<ProbeParams> {
    let mut p = random_params(d, h, c, backbone, seed)?;
    if let Some(down) = p.matrix_mut(Weight::Down) {
        down.as_mut_slice().fill(0.0);
    }
    Ok(p)
}

/// Draws every weight uniformly from ±1/√fan_in, deterministically from
/// `seed`. Values are rounded to `f32` so the probe survives a save/load
/// cycle unchanged.
pub fn random_params(d: usize, h: usize, c: usize, backbone: Backbone, seed: u64) -> Result<ProbeParams> {
    if d == 0 || h == 0 || c == 0 {
        return Err(Error::Shape(format!("dimensions must be positive (d={d}, h={h}, C={c})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let x = (2.0 * rng.random::<f64>() - 1.0) * bound;
                let mut w = x as f32;
                if f64::from(w.abs()) > bound {
                    w = f32::from_bits(w.to_bits() - 1);
                }
                f64::from(w)
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized above")
    };
    let gate = match backbone {
        Backbone::Gated => Some(draw(h, d)),
        Backbone::Standard => None,
    };
    let up = draw(h, d);
    let down = draw(c, h);
    ProbeParams::from_matrices(backbone, gate, up, down)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_parameter_count() {
        // Shape arithmetic only; nothing is allocated.
        let (d, h, c) = (4096usize, 11008usize, 2usize);
        assert_eq!(2 * h * d, 90_177_536);
        assert_eq!(c * h, 22_016);
        assert_eq!(2 * h * d + c * h, 90_199_552);
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let p = init_params(16, 32, 2, Backbone::Gated, 1).unwrap();
        assert_eq!(p.parameter_count(), 2 * 32 * 16 + 2 * 32);
        let p = init_params(16, 32, 1, Backbone::Standard, 1).unwrap();
        assert_eq!(p.parameter_count(), 32 * 16 + 32);
        assert!(p.gate().is_none());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(8, 12, 2, Backbone::Gated, 42).unwrap();
        let b = init_params(8, 12, 2, Backbone::Gated, 42).unwrap();
        let c = init_params(8, 12, 2, Backbone::Gated, 43).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = random_params(1, 1, 1, Backbone::Gated, 3).unwrap();
        assert_eq!(p.parameter_count(), 3);
        for (_, m) in p.matrices() {
            assert!(m.as_slice()[0].abs() <= 1.0);
        }
        let p = random_params(50, 7, 2, Backbone::Gated, 9).unwrap();
        for (w, m) in p.matrices() {
            let bound = 1.0 / (m.cols() as f64).sqrt();
            assert!(m.as_slice().iter().all(|v| v.abs() <= bound), "{}", w.name());
            assert!(m.as_slice().iter().all(|&v| f64::from(v as f32) == v));
        }
    }

    #[test]
    fn training_init_starts_with_zero_output() {
        let p = init_params(6, 9, 2, Backbone::Gated, 4).unwrap();
        assert!(p.down().as_slice().iter().all(|&v| v == 0.0));
        let r = random_params(6, 9, 2, Backbone::Gated, 4).unwrap();
        assert_eq!(p.gate(), r.gate());
        assert_eq!(p.up(), r.up());
    }

    #[test]
    fn from_matrices_checks_shapes() {
        let up = Matrix::zeros(3, 2);
        let down = Matrix::zeros(2, 3);
        assert!(ProbeParams::from_matrices(Backbone::Standard, None, up.clone(), down.clone()).is_ok());
        assert!(ProbeParams::from_matrices(Backbone::Gated, None, up.clone(), down.clone()).is_err());
        assert!(ProbeParams::from_matrices(
            Backbone::Gated,
            Some(Matrix::zeros(2, 2)),
            up.clone(),
            down.clone()
        )
        .is_err());
        assert!(ProbeParams::from_matrices(Backbone::Standard, None, up, Matrix::zeros(2, 4)).is_err());
    }
}
