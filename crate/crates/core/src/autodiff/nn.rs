use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Grads, Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value from `other`, which must hold the same names and
    /// shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", self.len(), other.len())));
        }
        for (name, value) in other.names.iter().zip(&other.values) {
            let slot = self.by_name_mut(name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters the loss did
/// not touch.
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                let dst = dst.get_or_insert_with(|| Tensor::zeros(src.rows(), src.cols()));
                for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(Tensor::all_finite)
    }
}

/// Forward context: a fresh graph plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx { g: Graph::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(&self, out: Var) -> ParamGrads {
        let mut grads: Grads = self.g.backward(out);
        ParamGrads(self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect())
    }
}

/// Weight init: uniform in `+-gain * sqrt(3 / fan_in)` (Kaiming-style; gain
/// `sqrt(2)` ahead of a ReLU, 1 for linear outputs).
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Affine layer `x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), init_uniform(rng, d_in, d_out, d_in, gain))?;
        let b = if bias { Some(store.insert(format!("{name}.b"), Tensor::zeros(1, d_out))?) } else { None };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (rows, cols) = cx.g.shape(x);
        if cols != self.d_in {
            return Err(Error::Shape { lhs: (rows, cols), rhs: (self.d_in, self.d_out), context: "linear input width" });
        }
        let w = cx.param(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                cx.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer widths including the input width, e.g. `[5, 32, 32]` is two layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default = "yes")]
    pub bias: bool,
    /// ReLU after the last layer too.
    #[serde(default)]
    pub final_relu: bool,
}

fn yes() -> bool {
    true
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, final_relu: bool) -> Self {
        MlpSpec { widths, bias: true, final_relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Invalid(format!("MLP widths must be >= 1 with at least one layer: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Stack of affine layers with ReLU between them (and after the last one when
/// `final_relu`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let relu_after = i + 1 < n || spec.final_relu;
            let gain = if relu_after { RELU_GAIN } else { 1.0 };
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.{i}"),
                spec.widths[i],
                spec.widths[i + 1],
                spec.bias,
                gain,
            )?);
        }
        Ok(Mlp { layers, final_relu: spec.final_relu })
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, cx: &mut Ctx, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(cx, x)?;
            if i + 1 < n || self.final_relu {
                x = cx.g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Builds a standalone MLP in a fresh store and evaluates it on `x`.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    if x.cols() != spec.d_in() {
        return Err(Error::Shape { lhs: x.shape(), rhs: (spec.d_in(), spec.d_out()), context: "mlp input" });
    }
    let n = spec.widths.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let w = params.id(&format!("{name}.{i}.w"))?;
        let b = if spec.bias { Some(params.id(&format!("{name}.{i}.b"))?) } else { None };
        layers.push(Linear { w, b, d_in: spec.widths[i], d_out: spec.widths[i + 1] });
    }
    let mlp = Mlp { layers, final_relu: spec.final_relu };
    let mut cx = Ctx::new(params);
    let xv = cx.g.constant(x.clone());
    let y = mlp.forward(&mut cx, xv)?;
    Ok(cx.g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input() {
        let mut store = ParamStore::new();
        store.insert("m.0.w", Tensor::identity(3)).unwrap();
        store.insert("m.0.b", Tensor::zeros(1, 3)).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).unwrap();
        let y = mlp_forward(&MlpSpec::new(vec![3, 3], false), &store, "m", &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut store = ParamStore::new();
        store.insert("m.0.w", Tensor::zeros(2, 3)).unwrap();
        store.insert("m.0.b", Tensor::from_rows(&[[0.5, -1.0, 2.0]]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let y = mlp_forward(&MlpSpec::new(vec![2, 3], false), &store, "m", &x).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![4, 2], false);
        Mlp::new(&mut store, &mut rng, "m", &spec).unwrap();
        let err = mlp_forward(&spec, &store, "m", &Tensor::zeros(3, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(3, 5)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MlpSpec::new(vec![3], false).validate().is_err());
        assert!(MlpSpec::new(vec![3, 0], false).validate().is_err());
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(2, 2)).unwrap();
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(3, 2)).unwrap();
        assert!(a.load_from(&b).is_err());
    }
}
