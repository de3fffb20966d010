//! The tiny network mapping (feature, t_hi, t_lo) to step coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tags, SeedTree};

const CHECKPOINT_VERSION: u32 = 1;
const SIGMOID_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Width the model feature is padded or truncated to.
    pub features: usize,
    pub hidden: usize,
    /// Sinusoid frequencies per time input; the embedding has `4 * frequencies` entries.
    pub frequencies: usize,
    /// Predict a time-scaling factor `a` for the second evaluation.
    pub time_scaling: bool,
    /// Replace the feature with zeros (trajectory-independent coefficients).
    pub zero_feature: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            features: 16,
            hidden: 64,
            frequencies: 4,
            time_scaling: true,
            zero_feature: false,
        }
    }
}

impl PredictorConfig {
    pub fn embedding_dim(&self) -> usize {
        4 * self.frequencies
    }

    pub fn outputs(&self) -> usize {
        if self.time_scaling {
            3
        } else {
            2
        }
    }

    pub fn param_count(&self) -> usize {
        let (f, h, e, o) = (
            self.features,
            self.hidden,
            self.embedding_dim(),
            self.outputs(),
        );
        h * f + h + h * h + h + o * (h + e) + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 {
            return Err(Error::Parameter("predictor widths must be positive".into()));
        }
        if self.param_count() > 20_000 {
            return Err(Error::Parameter(format!(
                "predictor has {} parameters, limit is 20000",
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Predictor weights. Matrices act on column vectors: `z1 = w1 h + b1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub config: PredictorConfig,
    /// hidden x features
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// hidden x hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// outputs x (hidden + embedding)
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

/// Step coefficients: split ratio `r`, direction scale `c`, time scale `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorOutput {
    pub r: f64,
    pub c: f64,
    pub a: Option<f64>,
}

impl PredictorOutput {
    pub const NEUTRAL: PredictorOutput = PredictorOutput {
        r: 0.5,
        c: 1.0,
        a: None,
    };

    pub fn time_scale(&self) -> f64 {
        self.a.unwrap_or(1.0)
    }

    /// `(r, c[, a])` as a slice-friendly vector.
    pub(crate) fn to_vec(self) -> Vec<f64> {
        let mut v = vec![self.r, self.c];
        v.extend(self.a);
        v
    }

    pub(crate) fn from_slice(y: &[f64]) -> Self {
        Self {
            r: y[0],
            c: y[1],
            a: y.get(2).copied(),
        }
    }
}

/// Intermediate values kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    h: DVector<f64>,
    a1: DVector<f64>,
    u: DVector<f64>,
    sig: Vec<f64>,
    pub output: PredictorOutput,
}

fn sigmoid(o: f64) -> f64 {
    (1.0 / (1.0 + (-o).exp())).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

/// Output ranges: r in (0,1), c in (0,2), a in (0.5,1.5).
const OUTPUT_MAPS: [(f64, f64); 3] = [(1.0, 0.0), (2.0, 0.0), (1.0, 0.5)];

/// Sin/cos embedding of `ln t_hi` and `ln t_lo` at frequencies `2^(j-2)`.
pub fn time_embedding(frequencies: usize, t_hi: f64, t_lo: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * frequencies);
    for t in [t_hi, t_lo] {
        let l = t.ln();
        for j in 0..frequencies {
            let w = 2f64.powi(j as i32 - 2);
            out.push((w * l).sin());
            out.push((w * l).cos());
        }
    }
    out
}

impl PredictorParams {
    /// All-zero weights: every input maps to r=0.5, c=1, a=1.
    pub fn zeros(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let (f, h, e, o) = (
            config.features,
            config.hidden,
            config.embedding_dim(),
            config.outputs(),
        );
        Ok(Self {
            config,
            w1: DMatrix::zeros(h, f),
            b1: DVector::zeros(h),
            w2: DMatrix::zeros(h, h),
            b2: DVector::zeros(h),
            w3: DMatrix::zeros(o, h + e),
            b3: DVector::zeros(o),
        })
    }

    /// Random hidden layers, zero output layer. Outputs start at the neutral
    /// point but the feature path can still receive gradient.
    pub fn init_neutral(config: PredictorConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = SeedTree::new(seed).child(tags::INIT).rng();
        for w in [&mut p.w1, &mut p.w2] {
            let normal = Normal::new(0.0, 1.0 / (w.ncols() as f64).sqrt()).expect("valid std");
            w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.config.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    /// Flat view in a fixed order (w1, b1, w2, b2, w3, b3; matrices column-major).
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn from_flat(config: PredictorConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if flat.len() != p.len() {
            return Err(Error::Parameter(format!(
                "expected {} parameters, got {}",
                p.len(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for block in p.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Feature vector as seen by the first layer: padded/truncated, or zeroed.
    pub fn prepare_feature(&self, feature: &[f64]) -> DVector<f64> {
        let f = self.config.features;
        if self.config.zero_feature {
            return DVector::zeros(f);
        }
        DVector::from_fn(f, |i, _| feature.get(i).copied().unwrap_or(0.0))
    }

    pub fn forward(&self, feature: &[f64], t_hi: f64, t_lo: f64) -> Result<ForwardCache> {
        if !(t_hi > 0.0 && t_lo > 0.0 && t_hi.is_finite()) {
            return Err(Error::Domain(format!(
                "predictor times must be positive, got {t_hi}, {t_lo}"
            )));
        }
        let h = self.prepare_feature(feature);
        let a1 = (&self.w1 * &h + &self.b1).map(f64::tanh);
        let a2 = (&self.w2 * &a1 + &self.b2).map(f64::tanh);
        let emb = time_embedding(self.config.frequencies, t_hi, t_lo);
        let u = DVector::from_iterator(a2.len() + emb.len(), a2.iter().copied().chain(emb));
        let o = &self.w3 * &u + &self.b3;
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite predictor activation".into()));
        }
        let sig: Vec<f64> = o.iter().map(|&v| sigmoid(v)).collect();
        let y: Vec<f64> = sig
            .iter()
            .zip(OUTPUT_MAPS)
            .map(|(s, (scale, shift))| shift + scale * s)
            .collect();
        Ok(ForwardCache {
            h,
            a1,
            u,
            sig,
            output: PredictorOutput::from_slice(&y),
        })
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss sensitivities `dl_dy` to the outputs `(r, c[, a])`.
    pub fn backward(&self, cache: &ForwardCache, dl_dy: &[f64]) -> PredictorParams {
        let hdim = self.config.hidden;
        let d_o = DVector::from_iterator(
            cache.sig.len(),
            cache
                .sig
                .iter()
                .zip(OUTPUT_MAPS)
                .zip(dl_dy)
                .map(|((s, (scale, _)), g)| g * scale * s * (1.0 - s)),
        );
        let w3 = &d_o * cache.u.transpose();
        let d_u = self.w3.transpose() * &d_o;
        let a2 = cache.u.rows(0, hdim);
        let d_z2 = d_u.rows(0, hdim).component_mul(&a2.map(|v| 1.0 - v * v));
        let w2 = &d_z2 * cache.a1.transpose();
        let d_a1 = self.w2.transpose() * &d_z2;
        let d_z1 = d_a1.component_mul(&cache.a1.map(|v| 1.0 - v * v));
        let w1 = &d_z1 * cache.h.transpose();
        PredictorParams {
            config: self.config,
            w1,
            b1: d_z1,
            w2,
            b2: d_z2,
            w3,
            b3: d_o,
        }
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, other: &PredictorParams, alpha: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&Checkpoint::from(self))
            .map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        ck.into_params().map_err(|e| Error::parse(path, e))
    }
}

/// Predict step coefficients from a model feature and the interval ends.
pub fn predict(
    params: &PredictorParams,
    feature: &[f64],
    t_hi: f64,
    t_lo: f64,
) -> Result<PredictorOutput> {
    Ok(params.forward(feature, t_hi, t_lo)?.output)
}

#[derive(Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl Matrix {
    fn of(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn into_dmatrix(self, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(Error::Parameter(format!(
                "{name}: expected {rows}x{cols}, got {}x{} with {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: PredictorConfig,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    w3: Matrix,
    b3: Vec<f64>,
}

impl From<&PredictorParams> for Checkpoint {
    fn from(p: &PredictorParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: p.config,
            w1: Matrix::of(&p.w1),
            b1: p.b1.as_slice().to_vec(),
            w2: Matrix::of(&p.w2),
            b2: p.b2.as_slice().to_vec(),
            w3: Matrix::of(&p.w3),
            b3: p.b3.as_slice().to_vec(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<PredictorParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let c = self.config;
        c.validate()?;
        let (f, h, e, o) = (c.features, c.hidden, c.embedding_dim(), c.outputs());
        let vector = |v: Vec<f64>, n: usize, name: &str| {
            if v.len() == n {
                Ok(DVector::from_vec(v))
            } else {
                Err(Error::Parameter(format!(
                    "{name}: expected {n} values, got {}",
                    v.len()
                )))
            }
        };
        let p = PredictorParams {
            config: c,
            w1: self.w1.into_dmatrix(h, f, "w1")?,
            b1: vector(self.b1, h, "b1")?,
            w2: self.w2.into_dmatrix(h, h, "w2")?,
            b2: vector(self.b2, h, "b2")?,
            w3: self.w3.into_dmatrix(o, h + e, "w3")?,
            b3: vector(self.b3, o, "b3")?,
        };
        if !p.is_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite weights".into()));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> PredictorConfig {
        PredictorConfig {
            hidden: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_params_are_neutral() {
        let p = PredictorParams::zeros(PredictorConfig::default()).unwrap();
        let out = predict(&p, &[0.3, 0.7], 80.0, 2.5).unwrap();
        assert_eq!(
            out,
            PredictorOutput {
                r: 0.5,
                c: 1.0,
                a: Some(1.0)
            }
        );
        let no_a = PredictorParams::zeros(PredictorConfig {
            time_scaling: false,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            predict(&no_a, &[], 1.0, 0.5).unwrap(),
            PredictorOutput::NEUTRAL
        );
    }

    #[test]
    fn neutral_init_outputs_neutral_and_is_seeded() {
        let p = PredictorParams::init_neutral(PredictorConfig::default(), 5).unwrap();
        assert_eq!(predict(&p, &[1.0, 0.0], 10.0, 3.0).unwrap().c, 1.0);
        assert_eq!(
            p,
            PredictorParams::init_neutral(PredictorConfig::default(), 5).unwrap()
        );
        assert_ne!(
            p,
            PredictorParams::init_neutral(PredictorConfig::default(), 6).unwrap()
        );
        assert!(p.len() <= 20_000);
    }

    #[test]
    fn feature_sensitivity_and_zero_feature_flag() {
        let mut p = PredictorParams::init_neutral(small(), 1).unwrap();
        p.w3.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.1 * (i % 7) as f64 - 0.3);
        let a = predict(&p, &[1.0, 0.0], 5.0, 1.0).unwrap();
        let b = predict(&p, &[0.0, 1.0], 5.0, 1.0).unwrap();
        assert_ne!(a, b);
        p.config.zero_feature = true;
        let a = predict(&p, &[1.0, 0.0], 5.0, 1.0).unwrap();
        let b = predict(&p, &[0.0, 1.0], 5.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flat_roundtrip_and_size_check() {
        let p = PredictorParams::init_neutral(small(), 2).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.len());
        assert_eq!(PredictorParams::from_flat(small(), &flat).unwrap(), p);
        assert!(PredictorParams::from_flat(small(), &flat[1..]).is_err());
    }

    #[test]
    fn oversized_predictor_rejected() {
        let big = PredictorConfig {
            hidden: 200,
            ..Default::default()
        };
        assert!(matches!(
            PredictorParams::zeros(big),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = PredictorParams::init_neutral(small(), 3).unwrap();
        p.b3[1] = 0.1 + 0.2;
        p.save(&path).unwrap();
        assert_eq!(PredictorParams::load(&path).unwrap(), p);

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            PredictorParams::load(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = PredictorParams::init_neutral(small(), 4).unwrap();
        p.w3.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.05 * ((i * 5) % 11) as f64 - 0.25);
        p.b3[0] = 0.2;
        let feature = [0.2, 0.5, 0.3];
        let weights = [0.7, -1.3, 0.4];
        let objective = |q: &PredictorParams| -> f64 {
            let y = predict(q, &feature, 7.0, 2.0).unwrap().to_vec();
            y.iter().zip(weights).map(|(y, w)| y * w).sum()
        };
        let cache = p.forward(&feature, 7.0, 2.0).unwrap();
        let grad = p.backward(&cache, &weights).to_flat();
        let flat = p.to_flat();
        for i in 0..flat.len() {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (objective(&PredictorParams::from_flat(small(), &up).unwrap())
                - objective(&PredictorParams::from_flat(small(), &dn).unwrap()))
                / 2e-6;
            assert!(
                (fd - grad[i]).abs() < 1e-7,
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(
            seed in 0u64..1000,
            gain in -50.0f64..50.0,
            f0 in 0.0f64..1.0,
            t_lo in 0.002f64..10.0,
            ratio in 1.01f64..100.0,
        ) {
            let mut p = PredictorParams::init_neutral(small(), seed).unwrap();
            p.w3.iter_mut().enumerate().for_each(|(i, v)| *v = gain * ((i % 3) as f64 - 1.0));
            p.b3.fill(gain);
            let out = predict(&p, &[f0, 1.0 - f0], t_lo * ratio, t_lo).unwrap();
            prop_assert!(out.r > 0.0 && out.r < 1.0);
            prop_assert!(out.c > 0.0 && out.c < 2.0);
            let a = out.a.unwrap();
            prop_assert!(a > 0.5 && a < 1.5);
        }
    }
}
