//! Named parameter storage and the small dense layers built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{adjacency_conv, Adjacency};
use crate::numerics::{Tape, Tensor, Var};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Replaces all values, checking names and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ from the model".into()));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::dim("parameter load", mine.shape(), theirs.shape()));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Parameters of one forward pass, bound to a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], gain / (rows.max(1) as f64).sqrt(), rng)
}

/// Applies a `[in, out]` matrix to the last axis of `x`.
pub fn project<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let wshape = w.shape();
    let (width, out) = (wshape[0], wshape[1]);
    if shape.last() != Some(&width) {
        return Err(Error::dim("project", &shape, &wshape));
    }
    let rows = shape.iter().product::<usize>() / width.max(1);
    let y = x.reshape(&[rows, width])?.matmul(w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out;
    y.reshape(&out_shape)
}

/// Adds a `[C]` bias along the last axis.
pub fn add_bias<'t>(x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let width = b.shape()[0];
    if shape.last() != Some(&width) {
        return Err(Error::dim("bias", &shape, &[width]));
    }
    let rows = shape.iter().product::<usize>() / width.max(1);
    x.reshape(&[rows, width])?.add(b.expand(0, rows)?)?.reshape(&shape)
}

/// Dense layer over the last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(input, output, gain, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = project(x, p.get(self.weight))?;
        match self.bias {
            Some(b) => add_bias(y, p.get(b)),
            None => Ok(y),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalises the last axis to zero mean and unit variance, then applies a
/// per-channel gain and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let gain = p.get(self.gain);
        let width = gain.shape()[0];
        if shape.last() != Some(&width) {
            return Err(Error::dim("layer norm", &shape, &[width]));
        }
        let rows = shape.iter().product::<usize>() / width.max(1);
        let normed = standardize_last_axis(x)?.reshape(&[rows, width])?;
        let scaled = normed.mul(gain.expand(0, rows)?)?.reshape(&shape)?;
        add_bias(scaled, p.get(self.shift))
    }
}

/// Zero mean and unit variance along the last axis, without parameters.
pub fn standardize_last_axis<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let width = *shape.last().ok_or_else(|| Error::dim("standardize", &shape, &[1]))?;
    let rows = shape.iter().product::<usize>() / width.max(1);
    let flat = x.reshape(&[rows, width])?;
    let centred = flat.sub(flat.mean_axis(1)?.expand(1, width)?)?;
    let inv_std = centred
        .mul(centred)?
        .mean_axis(1)?
        .add_scalar(LAYER_NORM_EPS)
        .inv_sqrt();
    centred.mul(inv_std.expand(1, width)?)?.reshape(&shape)
}

/// Stack of skeleton-adjacency convolutions with relu between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConvStack {
    pub layers: Vec<ParamId>,
}

impl GraphConvStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 2 == widths.len() { 1.0 } else { 2f64.sqrt() };
                store.add(format!("{name}.{}", i + 1), init_weight(w[0], w[1], gain, rng))
            })
            .collect();
        GraphConvStack { layers }
    }

    /// Runs layers `range` on `x` (`[B,V,C]`). Relu is applied after every
    /// layer except the stack's last; the output of `range.end - 1` is raw.
    pub fn run<'t>(
        &self,
        p: &Bound<'t>,
        adjacency: &Adjacency,
        mut x: Var<'t>,
        range: std::ops::Range<usize>,
    ) -> Result<Var<'t>> {
        for (i, &layer) in self.layers[range.clone()].iter().enumerate() {
            if i > 0 {
                x = x.relu();
            }
            x = adjacency_conv(x, adjacency, p.get(layer))?;
        }
        Ok(x)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, 1.0, &mut rng);
        store
            .get_mut(lin.bias.unwrap())
            .data_mut()
            .copy_from_slice(&[0.5, -1.0]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let y = lin.forward(&p, tape.constant(x.clone())).unwrap().value();
        assert_eq!(y.shape(), &[2, 4, 2]);
        let w = store.get(lin.weight);
        for r in 0..8 {
            for o in 0..2 {
                let expect: f64 = (0..3).map(|i| x.data()[r * 3 + i] * w.at(&[i, o])).sum::<f64>() + [0.5, -1.0][o];
                assert!((y.data()[r * 2 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula_and_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        store
            .get_mut(ln.gain)
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, -0.5, 0.3]);
        store
            .get_mut(ln.shift)
            .data_mut()
            .copy_from_slice(&[0.1, 0.0, -0.2, 1.0]);
        let x = Tensor::randn(&[2, 3, 4], 2.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = ln.forward(&p, tape.constant(x.clone())).unwrap().value();
        for r in 0..6 {
            let row = &x.data()[r * 4..r * 4 + 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let expect = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * store.get(ln.gain).data()[c]
                    + store.get(ln.shift).data()[c];
                assert!((y.data()[r * 4 + c] - expect).abs() < 1e-12);
            }
        }

        let weights = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let loss = |xs: &[f64]| -> Result<f64> {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let x = tape.constant(Tensor::new(vec![2, 3, 4], xs.to_vec())?);
            ln.forward(&p, x)?
                .mul(tape.constant(weights.clone()))?
                .sum_all()
                .map(|v| v.item())
        };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let leaf = tape.param(&x);
        let out = ln
            .forward(&p, leaf)
            .unwrap()
            .mul(tape.constant(weights.clone()))
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = tape.backward(out).unwrap();
        let numeric = crate::numerics::central_difference(loss, x.data(), 1e-5).unwrap();
        let err = crate::numerics::max_relative_error(grads.get(leaf).data(), &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn identity_stack_on_identity_graph_composes_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let stack = GraphConvStack::new(&mut store, "dec", &[2, 2, 2], &mut rng);
        for &l in &stack.layers {
            *store.get_mut(l) = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -1.0]]).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![-2.0, 0.5]]).unwrap());
        let y = stack.run(&p, &Adjacency::identity(2), x, 0..2).unwrap().value();
        // diag(2,-1) · relu · diag(2,-1)
        assert_eq!(y.data(), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::filled(&[2, 2], 1.0));
        a.load_from(&b).unwrap();
        assert_eq!(a.get(ParamId(0)).data(), &[1.0; 4]);
        let mut c = ParamStore::new();
        c.add("w", Tensor::zeros(&[4]));
        assert!(a.load_from(&c).is_err());
        let mut d = ParamStore::new();
        d.add("v", Tensor::zeros(&[2, 2]));
        assert!(a.load_from(&d).is_err());
    }
}
