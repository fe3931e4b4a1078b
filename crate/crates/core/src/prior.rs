//! The coordinate network: a small MLP from points (optionally with time
//! embeddings) to 3D displacements.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud};
use crate::scalar::Real;
pub use crate::tape::Activation;
use crate::tape::{activate, affine, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub output_dim: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            input_dim: 3,
            hidden_width: 128,
            hidden_layers: 4,
            activation: Activation::Relu,
            output_dim: 3,
        }
    }
}

impl MlpArchitecture {
    pub fn scene_flow(hidden_width: usize, hidden_layers: usize) -> Self {
        Self {
            hidden_width,
            hidden_layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::param("hidden_width", "must be at least 1"));
        }
        if self.hidden_layers == 0 {
            return Err(Error::param("hidden_layers", "must be at least 1"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::param("input_dim/output_dim", "must be at least 1"));
        }
        if self.checked_param_count().is_none() {
            return Err(Error::param("hidden_width/hidden_layers", "parameter count overflows"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        shapes.push((self.input_dim, self.hidden_width));
        for _ in 1..self.hidden_layers {
            shapes.push((self.hidden_width, self.hidden_width));
        }
        shapes.push((self.hidden_width, self.output_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("validated architecture")
    }

    fn checked_param_count(&self) -> Option<usize> {
        let w = self.hidden_width;
        let first = self.input_dim.checked_add(1)?.checked_mul(w)?;
        let inner = w.checked_add(1)?.checked_mul(w)?.checked_mul(self.hidden_layers.checked_sub(1)?)?;
        let last = w.checked_add(1)?.checked_mul(self.output_dim)?;
        first.checked_add(inner)?.checked_add(last)
    }
}

/// Network parameters θ stored flat: per layer, `W` (fan_out × fan_in,
/// row-major) followed by `b` (fan_out).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPrior<T> {
    arch: MlpArchitecture,
    params: Vec<T>,
    seed: u64,
}

/// Initializes weights from `U(-1/√fan_in, 1/√fan_in)` with zero biases.
pub fn init_prior<T: Real>(arch: MlpArchitecture, seed: u64) -> Result<NeuralPrior<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(arch.param_count());
    for (fin, fout) in arch.layer_shapes() {
        let bound = 1.0 / (fin as f64).sqrt();
        params.extend((0..fin * fout).map(|_| T::lit(rng.gen_range(-bound..=bound))));
        params.extend(std::iter::repeat(T::zero()).take(fout));
    }
    Ok(NeuralPrior { arch, params, seed })
}

impl<T: Real> NeuralPrior<T> {
    pub fn from_params(arch: MlpArchitecture, params: Vec<T>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::LengthMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("params", "non-finite parameter"));
        }
        Ok(Self { arch, params, seed })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.arch.layer_shapes().into_iter().map(move |(fin, fout)| {
            let here = offset;
            offset += (fin + 1) * fout;
            (here, fin, fout)
        })
    }

    fn weight(&self, offset: usize, fin: usize, fout: usize) -> Array2<T> {
        Array2::from_shape_vec((fout, fin), self.params[offset..offset + fin * fout].to_vec())
            .expect("block sized from architecture")
    }

    fn bias(&self, offset: usize, fin: usize, fout: usize) -> Array2<T> {
        let start = offset + fin * fout;
        Array2::from_shape_vec((1, fout), self.params[start..start + fout].to_vec())
            .expect("block sized from architecture")
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                actual: cols,
            });
        }
        Ok(())
    }

    /// Evaluates the network on the rows of `x` without recording.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x.ncols())?;
        let layers = self.arch.hidden_layers + 1;
        let mut h = x.to_owned();
        for (l, (offset, fin, fout)) in self.blocks().enumerate() {
            h = affine(&h, &self.weight(offset, fin, fout), &self.bias(offset, fin, fout));
            if l + 1 < layers {
                h = activate(&h, self.arch.activation);
            }
        }
        Ok(h)
    }

    /// Records the network applied to node `x` on `tape`; returns the output node.
    pub fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).ncols())?;
        if tape.param_len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: tape.param_len(),
            });
        }
        let layers = self.arch.hidden_layers + 1;
        let mut h = x;
        for (l, (offset, fin, fout)) in self.blocks().enumerate() {
            let w = tape.param(offset, self.weight(offset, fin, fout))?;
            let b = tape.param(offset + fin * fout, self.bias(offset, fin, fout))?;
            h = tape.affine(h, w, b)?;
            if l + 1 < layers {
                h = tape.activation(h, self.arch.activation);
            }
        }
        Ok(h)
    }

    /// Flow `Φ(p_i; θ)` for every point, without recording.
    pub fn evaluate_flow(&self, cloud: &PointCloud<T>) -> Result<FlowField<T>> {
        let out = self.forward(cloud.to_array().view())?;
        FlowField::from_array(&out)
    }

    /// Records `Φ(P; θ)` on `tape`; returns the `N×3` flow node.
    pub fn record_flow(&self, tape: &mut Tape<T>, cloud: &PointCloud<T>) -> Result<Var> {
        let x = tape.constant(cloud.to_array());
        self.record(tape, x)
    }

    /// Product of per-layer spectral norms times the activation's slope
    /// bound: a Lipschitz constant for the whole network.
    pub fn lipschitz_bound(&self) -> f64 {
        let slope = self.arch.activation.lipschitz();
        let mut bound = 1.0;
        for (i, (offset, fin, fout)) in self.blocks().enumerate() {
            let w = self.weight(offset, fin, fout).mapv(|v| v.as_f64());
            bound *= spectral_norm(&w);
            if i < self.arch.hidden_layers {
                bound *= slope;
            }
        }
        bound
    }
}

/// Largest singular value via power iteration on `WᵀW`.
fn spectral_norm(w: &Array2<f64>) -> f64 {
    let gram = w.t().dot(w);
    let n = gram.nrows();
    let mut v = Array2::from_elem((n, 1), 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..500 {
        let u = gram.dot(&v);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = u / norm;
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn small_arch() -> MlpArchitecture {
        MlpArchitecture::scene_flow(8, 2)
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(
            MlpArchitecture::default().param_count(),
            3 * 128 + 128 + 3 * (128 * 128 + 128) + 128 * 3 + 3
        );
        assert_eq!(MlpArchitecture::default().param_count(), 50_435);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_prior::<f64>(small_arch(), 5).unwrap();
        let b = init_prior::<f64>(small_arch(), 5).unwrap();
        let c = init_prior::<f64>(small_arch(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let net = init_prior::<f64>(MlpArchitecture::default(), 1).unwrap();
        for (offset, fin, fout) in net.blocks() {
            let bound = 1.0 / (fin as f64).sqrt();
            let w = &net.params()[offset..offset + fin * fout];
            assert!(w.iter().all(|v| v.abs() <= bound));
            let b = &net.params()[offset + fin * fout..offset + (fin + 1) * fout];
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_network_gives_zero_flow() {
        let arch = small_arch();
        let net = NeuralPrior::<f64>::from_params(arch, vec![0.0; arch.param_count()], 0).unwrap();
        let cloud = PointCloud::new(vec![Point3::new(1.0, -2.0, 0.5); 4]).unwrap();
        let flow = net.evaluate_flow(&cloud).unwrap();
        assert!(flow.vectors().iter().all(|v| *v == Point3::zero()));
    }

    #[test]
    fn tape_and_direct_forward_agree_bitwise() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Sine] {
            let arch = MlpArchitecture {
                activation: act,
                ..small_arch()
            };
            let net = init_prior::<f64>(arch, 3).unwrap();
            let cloud = PointCloud::new(vec![
                Point3::new(0.1, 0.2, 0.3),
                Point3::new(-1.0, 2.0, 0.0),
                Point3::new(0.1, 0.2, 0.3),
            ])
            .unwrap();
            let mut tape = Tape::new(net.params().len());
            let out = net.record_flow(&mut tape, &cloud).unwrap();
            let direct = net.forward(cloud.to_array().view()).unwrap();
            assert_eq!(tape.value(out), &direct);
            assert_eq!(direct.row(0), direct.row(2));
        }
    }

    #[test]
    fn wrong_input_dim() {
        let net = init_prior::<f64>(small_arch(), 0).unwrap();
        let x = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            net.forward(x.view()),
            Err(Error::DimensionMismatch { expected: 3, actual: 4 })
        ));
    }

    #[test]
    fn output_gradients_match_central_differences() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Sine] {
            let arch = MlpArchitecture {
                activation: act,
                ..small_arch()
            };
            let net = init_prior::<f64>(arch, 17).unwrap();
            let cloud = PointCloud::new(vec![
                Point3::new(0.3, -0.2, 0.9),
                Point3::new(-0.7, 0.4, 0.1),
            ])
            .unwrap();
            for (row, col) in [(0, 0), (1, 2)] {
                let mut tape = Tape::new(net.params().len());
                let out = net.record_flow(&mut tape, &cloud).unwrap();
                let mut sel = Array2::zeros((2, 3));
                sel[[row, col]] = 1.0;
                let mask = tape.constant(sel);
                let picked = tape.mul(out, mask).unwrap();
                let root = tape.sum(picked);
                let grad = tape.backward(root).unwrap().into_params();
                let h = 1e-6;
                for k in 0..net.params().len() {
                    let eval = |delta: f64| {
                        let mut p = net.clone();
                        p.params_mut()[k] += delta;
                        p.forward(cloud.to_array().view()).unwrap()[[row, col]]
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let scale = fd.abs().max(grad[k].abs()).max(1e-3);
                    assert!(
                        (fd - grad[k]).abs() / scale < 1e-6,
                        "{act:?} param {k}: fd {fd} vs {}",
                        grad[k]
                    );
                }
            }
        }
    }
}
