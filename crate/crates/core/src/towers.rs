//! Recurrent encoders for student and question histories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the question side of a pair is represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    /// Recurrent assessment over the question's answer history.
    Dynamic,
    /// A learned vector per question id (no history).
    QuestionIdEmbed,
    /// The concept embedding of the question (no history).
    ConceptIdEmbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    pub dim_edge: usize,
    pub dim_node: usize,
    pub dim_time: usize,
    pub use_multiset: bool,
    pub use_dual_time: bool,
    pub use_time: bool,
    pub question_mode: QuestionMode,
    pub use_concept_in_question_output: bool,
    pub share_output_projection: bool,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            dim_edge: 64,
            dim_node: 64,
            dim_time: 64,
            use_multiset: true,
            use_dual_time: true,
            use_time: true,
            question_mode: QuestionMode::Dynamic,
            use_concept_in_question_output: true,
            share_output_projection: false,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_edge == 0 || self.dim_node == 0 || self.dim_time == 0 {
            return Err(Error::Config("tower dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Width of the fused student event before projection.
    pub fn student_input_width(&self) -> usize {
        self.dim_edge * 2 + self.use_time as usize * self.dim_time + self.use_multiset as usize * self.dim_node
    }

    pub fn question_input_width(&self) -> usize {
        self.dim_edge + self.use_time as usize * self.dim_time + self.use_multiset as usize * self.dim_node
    }
}

/// `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_weight(&format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_bias(&format!("{name}.bias"), fan_out),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.affine(x, w, b)
    }
}

/// Standard GRU:
/// `z = σ(x·W_z + h·U_z + b_z)`, `r = σ(x·W_r + h·U_r + b_r)`,
/// `ĥ = tanh(x·W_h + (r⊙h)·U_h + b_h)`, `h' = (1−z)⊙h + z⊙ĥ`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

struct GateInputs {
    z: Var,
    r: Var,
    h: Var,
}

impl GruCell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut w = |gate: &str, fan_in| store.add_weight(&format!("{name}.{gate}"), fan_in, hidden, rng);
        let (w_z, u_z) = (w("w_z", input), w("u_z", hidden));
        let (w_r, u_r) = (w("w_r", input), w("u_r", hidden));
        let (w_h, u_h) = (w("w_h", input), w("u_h", hidden));
        Self {
            w_z,
            u_z,
            b_z: store.add_bias(&format!("{name}.b_z"), hidden),
            w_r,
            u_r,
            b_r: store.add_bias(&format!("{name}.b_r"), hidden),
            w_h,
            u_h,
            b_h: store.add_bias(&format!("{name}.b_h"), hidden),
            input,
            hidden,
        }
    }

    fn input_projection<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<GateInputs> {
        let mut proj = |w, b| -> Result<Var> {
            let w = tape.param(store, w)?;
            let b = tape.param(store, b)?;
            tape.affine(x, w, b)
        };
        Ok(GateInputs {
            z: proj(self.w_z, self.b_z)?,
            r: proj(self.w_r, self.b_r)?,
            h: proj(self.w_h, self.b_h)?,
        })
    }

    fn recur<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, gates: &GateInputs, h: Var) -> Result<Var> {
        let u_z = tape.param(store, self.u_z)?;
        let u_r = tape.param(store, self.u_r)?;
        let u_h = tape.param(store, self.u_h)?;
        let hz = tape.matmul(h, u_z)?;
        let z = tape.add(gates.z, hz)?;
        let z = tape.sigmoid(z)?;
        let hr = tape.matmul(h, u_r)?;
        let r = tape.add(gates.r, hr)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let hh = tape.matmul(rh, u_h)?;
        let cand = tape.add(gates.h, hh)?;
        let cand = tape.tanh(cand)?;
        let keep = tape.one_minus(z)?;
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        tape.add(kept, fresh)
    }

    /// One update for a batch of rows: `x` is `[B, input]`, `h` is `[B, hidden]`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input || hs[1] != self.hidden || xs[0] != hs[0] {
            return Err(Error::shape("gru_step", &xs, &hs));
        }
        let gates = self.input_projection(tape, store, x)?;
        self.recur(tape, store, &gates, h)
    }

    /// Runs the cell over step-major inputs `[len·batch, input]` from a zero
    /// state. Rows whose mask bit is false leave the state untouched.
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: Var,
        mask: &[bool],
        batch: usize,
    ) -> Result<Var> {
        let rows = tape.value(inputs).rows();
        if batch == 0 || !rows.is_multiple_of(batch) || mask.len() != rows || tape.value(inputs).cols() != self.input {
            return Err(Error::shape("gru_run", tape.shape(inputs), &[mask.len(), batch]));
        }
        let len = rows / batch;
        let gates = self.input_projection(tape, store, inputs)?;
        let mut h = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        for step in 0..len {
            let m = &mask[step * batch..(step + 1) * batch];
            if !m.iter().any(|&b| b) {
                continue;
            }
            let slice = GateInputs {
                z: tape.slice_rows(gates.z, step * batch, batch)?,
                r: tape.slice_rows(gates.r, step * batch, batch)?,
                h: tape.slice_rows(gates.h, step * batch, batch)?,
            };
            let next = self.recur(tape, store, &slice, h)?;
            h = if m.iter().all(|&b| b) { next } else { tape.select_rows(m, next, h)? };
        }
        Ok(h)
    }
}

/// Inverted dropout mask for `[rows, cols]`: entries are `0` or `1/(1−p)`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

#[derive(Clone, Copy, Debug)]
pub struct StudentTower {
    pub integ: Linear,
    pub gru: GruCell,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct QuestionTower {
    pub integ: Linear,
    pub gru: GruCell,
    pub out: Linear,
}

/// Shared body of both towers: fuse, drop out, recur.
#[allow(clippy::too_many_arguments)]
fn fuse_and_recur<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    integ: &Linear,
    gru: &GruCell,
    parts: &[Var],
    mask: &[bool],
    batch: usize,
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<Var> {
    let rows = mask.len();
    for &p in parts {
        if tape.value(p).rows() != rows {
            return Err(Error::shape("tower features", tape.shape(p), &[rows]));
        }
    }
    let fused = tape.concat_cols(parts)?;
    let mut x = integ.forward(tape, store, fused)?;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let cols = tape.value(x).cols();
            let m = dropout_mask(rows, cols, rate, &mut RngAdapter(rng));
            x = tape.mul_const(x, m)?;
        }
    }
    gru.run(tape, store, x, mask, batch)
}

struct RngAdapter<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngAdapter<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

impl StudentTower {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TowerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim_edge;
        Self {
            integ: Linear::new(store, "student.integ", cfg.student_input_width(), d, rng),
            gru: GruCell::new(store, "student.gru", d, d, rng),
            out: Linear::new(store, "student.out", d, d, rng),
        }
    }

    /// `parts` are the per-position feature blocks, each `[len·batch, ·]`
    /// step-major. Returns `[batch, dim_edge]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        parts: &[Var],
        mask: &[bool],
        batch: usize,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let h = fuse_and_recur(tape, store, &self.integ, &self.gru, parts, mask, batch, dropout)?;
        self.out.forward(tape, store, h)
    }
}

impl QuestionTower {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TowerConfig, shared_out: Option<Linear>, rng: &mut impl Rng) -> Self {
        let d = cfg.dim_edge;
        let integ = Linear::new(store, "question.integ", cfg.question_input_width(), d, rng);
        let gru = GruCell::new(store, "question.gru", d, d, rng);
        let out = shared_out.unwrap_or_else(|| Linear::new(store, "question.out", d, d, rng));
        Self { integ, gru, out }
    }

    /// As [`StudentTower::forward`]; `target_concept` (`[batch, dim_edge]`),
    /// when given, is added to the final state before projection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        parts: &[Var],
        mask: &[bool],
        batch: usize,
        target_concept: Option<Var>,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let mut h = fuse_and_recur(tape, store, &self.integ, &self.gru, parts, mask, batch, dropout)?;
        if let Some(c) = target_concept {
            h = tape.add(h, c)?;
        }
        self.out.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(input: usize, hidden: usize, seed: u64) -> (ParamStore<f64>, GruCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = GruCell::new(&mut store, "gru", input, hidden, &mut rng);
        (store, c)
    }

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let (mut store, c) = cell(2, 2, 1);
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let x = tape.constant(row(&[0.3, -0.7])).unwrap();
        let h = tape.constant(row(&[0.8, -0.4])).unwrap();
        let out = c.step(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.4, -0.2]);
    }

    #[test]
    fn zero_input_and_state_is_a_fixed_point() {
        let (store, c) = cell(2, 2, 2);
        let mut tape = Tape::new();
        let x = tape.constant(row(&[0.0, 0.0])).unwrap();
        let h = tape.constant(row(&[0.0, 0.0])).unwrap();
        let out = c.step(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn step_matches_hand_arithmetic() {
        let (store, c) = cell(2, 2, 3);
        let x = [0.5, -1.5];
        let h = [0.25, 0.75];
        let m = |id: ParamId| store.value(id).clone();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // v·W for W stored [in, out].
        let vm = |v: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..w.cols()).map(|j| (0..v.len()).map(|i| v[i] * w.get(i, j)).sum()).collect()
        };
        let bias = |id: ParamId| store.value(id).data().to_vec();
        let (xz, hz, bz) = (vm(&x, &m(c.w_z)), vm(&h, &m(c.u_z)), bias(c.b_z));
        let (xr, hr, br) = (vm(&x, &m(c.w_r)), vm(&h, &m(c.u_r)), bias(c.b_r));
        let z: Vec<f64> = (0..2).map(|i| sig(xz[i] + hz[i] + bz[i])).collect();
        let r: Vec<f64> = (0..2).map(|i| sig(xr[i] + hr[i] + br[i])).collect();
        let rh: Vec<f64> = (0..2).map(|i| r[i] * h[i]).collect();
        let (xh, hh, bh) = (vm(&x, &m(c.w_h)), vm(&rh, &m(c.u_h)), bias(c.b_h));
        let cand: Vec<f64> = (0..2).map(|i| (xh[i] + hh[i] + bh[i]).tanh()).collect();
        let want: Vec<f64> = (0..2).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(row(&x)).unwrap();
        let hv = tape.constant(row(&h)).unwrap();
        let out = c.step(&mut tape, &store, xv, hv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn step_rejects_mismatched_dims() {
        let (store, c) = cell(3, 2, 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let h = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(c.step(&mut tape, &store, x, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn three_chained_steps_match_finite_differences() {
        let (store, c) = cell(3, 4, 5);
        let xs = Tensor::from_f64(&[3, 3], &[0.2, -0.4, 0.9, -1.1, 0.3, 0.05, 0.7, 0.7, -0.2]).unwrap();
        let loss = |s: &ParamStore<f64>, t: &mut Tape<f64>| {
            let x = t.constant(xs.clone())?;
            let h = c.run(t, s, x, &[true; 3], 1)?;
            let sq = t.mul(h, h)?;
            t.sum(sq)
        };
        for (name, err) in check_param_gradients(&store, loss, 1e-5).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn masked_steps_carry_the_state() {
        let (store, c) = cell(2, 3, 6);
        // Batch of two; row 1 has its first step masked out.
        let xs = Tensor::from_f64(&[4, 2], &[0.1, 0.2, 9.0, 9.0, 0.3, 0.4, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xs).unwrap();
        let h = c.run(&mut tape, &store, x, &[true, false, true, true], 2).unwrap();
        let mut single = Tape::new();
        let x1 = single.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.4]).unwrap()).unwrap();
        let h1 = c.run(&mut single, &store, x1, &[true], 1).unwrap();
        assert_eq!(tape.value(h).row(1), single.value(h1).row(0));
    }

    #[test]
    fn long_random_run_stays_finite() {
        let (store, c) = cell(4, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::inference();
        let mut h = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            let xv = tape.constant(row(&x)).unwrap();
            h = c.step(&mut tape, &store, xv, h).unwrap();
        }
        assert!(tape.value(h).data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Tensor<f64> = dropout_mask(100, 10, 0.1, &mut rng);
        let keep = 1.0 / 0.9;
        assert!(m.data().iter().all(|&v| v == 0.0 || v == keep));
        let dropped = m.data().iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&dropped), "{dropped}");
    }
}
