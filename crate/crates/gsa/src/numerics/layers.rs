//! Named parameter storage and the layer set: dense, GRU cell, conv.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::tape::{ConvMeta, Tape, Var};
use super::tensor::{Real, Tensor};

/// Index of a parameter inside its `ParamSet`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    /// Adam first moment.
    pub m: Tensor<R>,
    /// Adam second moment.
    pub v: Tensor<R>,
    pub step: u64,
}

/// Ordered collection of named parameter tensors with per-parameter
/// optimizer state. Iteration order is registration order, which is fixed
/// by construction and therefore identical across runs.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<R: Real> {
    entries: Vec<Param<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.entries.push(Param {
            name,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.entries.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<R>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Insert every parameter into `tape` as a leaf, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    step: p.step,
                })
                .collect(),
        }
    }
}

/// A `ParamSet`'s leaves on a particular tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_weight<R: Real>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<R> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| R::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_rows(rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Silu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<R: Real>(self, tape: &mut Tape<R>, v: Var) -> Var {
        match self {
            Activation::None => v,
            Activation::Silu => tape.silu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }
}

/// Dense layer y = act(x W + b).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let w = ps.add(format!("{prefix}.w"), init_weight(rng, in_dim, out_dim, in_dim));
        let b = ps.add(format!("{prefix}.b"), Tensor::zeros(&[1, out_dim]));
        Self {
            w,
            b,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, bound: &Bound, input: Var) -> Var {
        let got = tape.value(input).cols();
        assert_eq!(
            got, self.in_dim,
            "linear input width {} does not match weight input dim {}",
            got, self.in_dim
        );
        let xw = tape.matmul(input, bound.var(self.w));
        let y = tape.add_bias(xw, bound.var(self.b));
        self.activation.apply(tape, y)
    }
}

/// Multi-layer perceptron with a shared hidden width.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` = [in, hidden.., out]; hidden layers use `hidden_act`, the
    /// output layer is linear.
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        dims: &[usize],
        hidden_act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let act = if i + 2 == dims.len() { Activation::None } else { hidden_act };
                Linear::new(ps, rng, &format!("{prefix}.{i}"), dims[i], dims[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, bound: &Bound, input: Var) -> Var {
        let mut x = input;
        for layer in &self.layers {
            x = layer.forward(tape, bound, x);
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }
}

/// Gated recurrent cell, cuDNN gate layout:
///
/// r = sigmoid(x Wxr + h Whr + br)
/// u = sigmoid(x Wxu + h Whu + bu)
/// c = tanh(x Wxc + r * (h Whc) + bc)
/// h' = u * h + (1 - u) * c
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    in_dim: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = ps.add(
            format!("{prefix}.w_ih"),
            init_weight(rng, in_dim, 3 * hidden, in_dim),
        );
        let b_ih = ps.add(format!("{prefix}.b_ih"), Tensor::zeros(&[1, 3 * hidden]));
        let w_hh = ps.add(
            format!("{prefix}.w_hh"),
            init_weight(rng, hidden, 3 * hidden, hidden),
        );
        let b_hh = ps.add(format!("{prefix}.b_hh"), Tensor::zeros(&[1, 3 * hidden]));
        Self {
            w_ih,
            b_ih,
            w_hh,
            b_hh,
            in_dim,
            hidden,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Input-to-hidden projection; separable so sequence models can batch it
    /// across timesteps in a single matmul.
    pub fn project_input<R: Real>(&self, tape: &mut Tape<R>, bound: &Bound, x: Var) -> Var {
        assert_eq!(
            tape.value(x).cols(),
            self.in_dim,
            "gru input width {} vs configured {}",
            tape.value(x).cols(),
            self.in_dim
        );
        let xw = tape.matmul(x, bound.var(self.w_ih));
        tape.add_bias(xw, bound.var(self.b_ih))
    }

    /// One step given the precomputed input projection.
    pub fn step_projected<R: Real>(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        xp: Var,
        h: Var,
    ) -> Var {
        let hd = self.hidden;
        assert_eq!(
            tape.value(h).cols(),
            hd,
            "gru hidden width {} vs configured {}",
            tape.value(h).cols(),
            hd
        );
        let hw = tape.matmul(h, bound.var(self.w_hh));
        let hp = tape.add_bias(hw, bound.var(self.b_hh));

        let xr = tape.slice_cols(xp, 0, hd);
        let xu = tape.slice_cols(xp, hd, hd);
        let xc = tape.slice_cols(xp, 2 * hd, hd);
        let hr = tape.slice_cols(hp, 0, hd);
        let hu = tape.slice_cols(hp, hd, hd);
        let hc = tape.slice_cols(hp, 2 * hd, hd);

        let r_pre = tape.add(xr, hr);
        let r = tape.sigmoid(r_pre);
        let u_pre = tape.add(xu, hu);
        let u = tape.sigmoid(u_pre);
        let gated = tape.mul(r, hc);
        let c_pre = tape.add(xc, gated);
        let c = tape.tanh(c_pre);

        // h' = u*h + (1-u)*c
        let uh = tape.mul(u, h);
        let uc = tape.mul(u, c);
        let c_minus_uc = tape.sub(c, uc);
        tape.add(uh, c_minus_uc)
    }

    pub fn step<R: Real>(&self, tape: &mut Tape<R>, bound: &Bound, x: Var, h: Var) -> Var {
        let xp = self.project_input(tape, bound, x);
        self.step_projected(tape, bound, xp, h)
    }
}

/// Strided conv layer over square single-plane or multi-plane images.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub meta: ConvMeta,
    pub activation: Activation,
}

impl Conv2dLayer {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        meta: ConvMeta,
        activation: Activation,
    ) -> Self {
        let fan_in = meta.patch_len();
        let w = ps.add(
            format!("{prefix}.w"),
            init_weight(rng, fan_in, meta.out_c, fan_in),
        );
        let b = ps.add(format!("{prefix}.b"), Tensor::zeros(&[1, meta.out_c]));
        Self {
            w,
            b,
            meta,
            activation,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, bound: &Bound, input: Var) -> Var {
        let y = tape.conv2d(input, bound.var(self.w), bound.var(self.b), self.meta);
        self.activation.apply(tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_zero_weights_annihilate() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut ps, &mut r, "l", 3, 2, Activation::None);
        ps.get_mut(lin.w).value = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(1, 3, vec![0.4, -0.2, 0.9]));
        let y = lin.forward(&mut tape, &bound, x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut ps, &mut r, "l", 3, 3, Activation::None);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        ps.get_mut(lin.w).value = eye;
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(1, 3, vec![0.4, -0.2, 0.9]));
        let y = lin.forward(&mut tape, &bound, x);
        assert_eq!(tape.value(y).data(), &[0.4, -0.2, 0.9]);
    }

    #[test]
    fn linear_basis_vector_selects_weight_row() {
        // Hand matrix multiply: e_0 . W = first row of W.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut ps, &mut r, "l", 3, 2, Activation::None);
        let w = ps.get(lin.w).value.clone();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(1, 3, vec![1.0, 0.0, 0.0]));
        let y = lin.forward(&mut tape, &bound, x);
        assert_eq!(tape.value(y).data(), &[w.at(0, 0), w.at(0, 1)]);
    }

    #[test]
    #[should_panic(expected = "linear input width")]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut ps, &mut r, "l", 3, 2, Activation::None);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(1, 4, vec![1.0; 4]));
        let _ = lin.forward(&mut tape, &bound, x);
    }

    fn zeroed_gru(hidden: usize, in_dim: usize) -> (ParamSet<f64>, GruCell) {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let cell = GruCell::new(&mut ps, &mut r, "gru", in_dim, hidden);
        for p in ps.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec().as_slice());
        }
        (ps, cell)
    }

    #[test]
    fn gru_all_zero_gives_zero_hidden() {
        let (ps, cell) = zeroed_gru(4, 3);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let h2 = cell.step(&mut tape, &bound, x, h);
        assert_eq!(tape.value(h2).data(), &[0.0; 4]);
    }

    #[test]
    fn gru_zero_weights_halve_hidden() {
        // Gates sit at sigmoid(0)=0.5 and the candidate is 0, so h' = 0.5 h.
        let (ps, cell) = zeroed_gru(4, 3);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let h = tape.constant(Tensor::from_rows(1, 4, vec![1.0, -2.0, 0.5, 4.0]));
        let h2 = cell.step(&mut tape, &bound, x, h);
        assert_eq!(tape.value(h2).data(), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn gru_matches_scalar_reference() {
        // Step-by-step evaluation of the gate equations with scalar loops.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut r = rng();
        let cell = GruCell::new(&mut ps, &mut r, "gru", 2, 4);
        let x = vec![0.3, -0.6];
        let h = vec![0.1, 0.2, -0.3, 0.4];

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wih = &ps.get(cell.w_ih).value;
        let whh = &ps.get(cell.w_hh).value;
        let mut expected = vec![0.0; 4];
        for j in 0..4 {
            let gate = |block: usize| {
                let col = block * 4 + j;
                let mut xs = 0.0;
                for (i, &xi) in x.iter().enumerate() {
                    xs += xi * wih.at(i, col);
                }
                let mut hs = 0.0;
                for (i, &hi) in h.iter().enumerate() {
                    hs += hi * whh.at(i, col);
                }
                (xs, hs)
            };
            let (xr, hr) = gate(0);
            let (xu, hu) = gate(1);
            let (xc, hc) = gate(2);
            let rj = sigmoid(xr + hr);
            let uj = sigmoid(xu + hu);
            let cj = (xc + rj * hc).tanh();
            expected[j] = uj * h[j] + (1.0 - uj) * cj;
        }

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false);
        let xv = tape.constant(Tensor::from_rows(1, 2, x));
        let hv = tape.constant(Tensor::from_rows(1, 4, h));
        let h2 = cell.step(&mut tape, &bound, xv, hv);
        for (got, want) in tape.value(h2).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
