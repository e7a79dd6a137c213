//! Fixed instruction and view encoders, modality fusion, and the learned
//! return/state/action/timestep embedding layer.
//!
//! The two encoders stand in for large pretrained models. Both are seeded
//! random maps that share one concept codebook: the text vector of landmark
//! token `k` and the direction the vision encoder maps landmark `k` to are
//! the same vector, and sector tokens line up with the heading directions.
//! That shared space is what makes elementwise fusion meaningful.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::env::instruction::{Token, Vocabulary, N_SECTORS};
use crate::env::observe::{raw_feature_dim, Observation, N_SCENERY};
use crate::env::sim::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_enc: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedState {
    pub s: Vec<f64>,
    pub view_index: Option<u8>,
    pub is_stop_candidate: bool,
}

fn gaussian(r: &mut StreamRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng::normal(r) * std).collect()
}

/// The frozen text and vision encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    cfg: EncoderConfig,
    vocab: Vocabulary,
    /// `vocab.size() x d_enc`
    token_table: Vec<f64>,
    /// `d_enc x raw_dim`, row-major
    projection: Vec<f64>,
    bias: Vec<f64>,
    raw_dim: usize,
}

impl Encoders {
    pub fn new(cfg: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        let d = cfg.d_enc;
        if d == 0 {
            return Err(Error::InvalidConfig("d_enc must be positive".into()));
        }
        let mut r = rng::stream(cfg.seed, &[rng::label("encoders")]);
        let nl = vocab.n_landmarks as usize;
        let concepts: Vec<Vec<f64>> = (0..nl).map(|_| gaussian(&mut r, d, 1.0)).collect();
        let axis_a = gaussian(&mut r, d, 1.0);
        let axis_b = gaussian(&mut r, d, 1.0);

        let mut token_table = Vec::with_capacity(vocab.size() * d);
        for t in 0..vocab.size() as u16 {
            let tok = Token(t);
            if let Some(s) = vocab.as_sector(tok) {
                let phi = s as f64 * 2.0 * core::f64::consts::PI / N_SECTORS as f64;
                let (c, sn) = (math::cos(phi), math::sin(phi));
                token_table.extend(axis_a.iter().zip(&axis_b).map(|(a, b)| c * a + sn * b));
            } else if let Some(k) = vocab.as_landmark(tok) {
                token_table.extend_from_slice(&concepts[k as usize]);
            } else {
                token_table.extend(gaussian(&mut r, d, 1.0));
            }
        }

        let raw_dim = raw_feature_dim(vocab.n_landmarks);
        let mut projection = vec![0.0; d * raw_dim];
        let scenery = gaussian(&mut r, d * N_SCENERY, 0.3);
        for i in 0..d {
            let row = &mut projection[i * raw_dim..(i + 1) * raw_dim];
            for k in 0..nl {
                row[k] = 0.5 * concepts[k][i];
            }
            row[nl] = 0.5 * axis_a[i];
            row[nl + 1] = 0.5 * axis_b[i];
            row[nl + 2..].copy_from_slice(&scenery[i * N_SCENERY..(i + 1) * N_SCENERY]);
        }
        let bias = gaussian(&mut r, d, 0.1);
        Ok(Self { cfg, vocab, token_table, projection, bias, raw_dim })
    }

    pub fn d_enc(&self) -> usize {
        self.cfg.d_enc
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    /// A ±1 key per token position; binding a token to its position is
    /// elementwise multiplication by the key.
    pub fn position_key(&self, p: usize) -> Vec<f64> {
        use rand::Rng;
        let mut r = rng::stream(self.cfg.seed, &[rng::label("position"), p as u64]);
        (0..self.cfg.d_enc).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    pub fn token_vector(&self, t: Token) -> Result<&[f64]> {
        let d = self.cfg.d_enc;
        self.token_table
            .get(t.index() * d..(t.index() + 1) * d)
            .ok_or(Error::InvalidConfig(alloc::format!("token {} outside vocabulary", t.0)))
    }

    /// Position-bound sum of token vectors, L2-normalised and scaled to
    /// norm `sqrt(d_enc)`.
    pub fn embed_instruction(&self, tokens: &[Token]) -> Result<InstructionEmbedding> {
        if tokens.is_empty() {
            return Err(Error::Empty("instruction"));
        }
        let d = self.cfg.d_enc;
        let mut x = vec![0.0; d];
        for (p, t) in tokens.iter().enumerate() {
            let e = self.token_vector(*t)?;
            let key = self.position_key(p);
            for j in 0..d {
                x[j] += key[j] * e[j];
            }
        }
        let n = math::norm(&x);
        if !(n > 0.0) {
            return Err(Error::NonFinite { op: "embed_instruction" });
        }
        let s = math::sqrt(d as f64) / n;
        x.iter_mut().for_each(|v| *v *= s);
        Ok(InstructionEmbedding(x))
    }

    /// `tanh(P f + b)`.
    pub fn embed_view(&self, raw: &[f64]) -> Result<ViewEmbedding> {
        if raw.len() != self.raw_dim {
            return Err(Error::DimensionMismatch { expected: self.raw_dim, got: raw.len() });
        }
        let d = self.cfg.d_enc;
        let out = (0..d)
            .map(|i| {
                let row = &self.projection[i * self.raw_dim..(i + 1) * self.raw_dim];
                math::tanh(row.iter().zip(raw).map(|(a, b)| a * b).sum::<f64>() + self.bias[i])
            })
            .collect();
        Ok(ViewEmbedding(out))
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// One step as the model sees it. Candidate `0` is STOP and has no vector
/// here; `candidates[i - 1]` is the fused vector of action `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStep {
    pub rtg: f64,
    pub t: usize,
    pub state: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub action: Option<usize>,
}

impl EncodedStep {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len() + 1
    }

    /// Input vector of candidate `i` (`None` for STOP).
    pub fn candidate(&self, i: usize) -> Option<&[f64]> {
        if i == 0 {
            None
        } else {
            self.candidates.get(i - 1).map(|v| v.as_slice())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrajectory {
    pub instruction: Vec<f64>,
    pub steps: Vec<EncodedStep>,
}

impl Encoders {
    /// Pooled state and per-candidate fused vectors for one observation.
    pub fn encode_observation(&self, x: &InstructionEmbedding, obs: &Observation) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut fused = Vec::with_capacity(obs.views.len());
        for v in &obs.views {
            let mut f = fuse(x, &self.embed_view(&v.feature)?)?;
            f.view_index = Some(v.heading_index);
            fused.push(f);
        }
        let state = pool_state(&fused)?;
        let candidates = obs
            .navigable
            .iter()
            .map(|n| fused.get(n.view as usize).map(|f| f.s.clone()).ok_or(Error::InvalidAction { index: n.view as usize, len: fused.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok((state, candidates))
    }

    pub fn encode_step(&self, x: &InstructionEmbedding, obs: &Observation, rtg: f64, t: usize, action: Option<usize>) -> Result<EncodedStep> {
        let (state, candidates) = self.encode_observation(x, obs)?;
        if let Some(a) = action {
            if a > candidates.len() {
                return Err(Error::InvalidAction { index: a, len: candidates.len() + 1 });
            }
        }
        Ok(EncodedStep { rtg, t, state, candidates, action })
    }

    /// Encode a stored trajectory, conditioning on its returns-to-go.
    pub fn encode_trajectory(&self, tr: &Trajectory) -> Result<EncodedTrajectory> {
        let x = self.embed_instruction(&tr.episode.instruction)?;
        let steps = tr
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| self.encode_step(&x, &s.observation, s.return_to_go, t, Some(s.action)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedTrajectory { instruction: x.0, steps })
    }
}

/// Elementwise product `x ⊙ o`.
pub fn fuse(x: &InstructionEmbedding, o: &ViewEmbedding) -> Result<FusedState> {
    if x.0.len() != o.0.len() {
        return Err(Error::DimensionMismatch { expected: x.0.len(), got: o.0.len() });
    }
    Ok(FusedState { s: x.0.iter().zip(&o.0).map(|(a, b)| a * b).collect(), view_index: None, is_stop_candidate: false })
}

/// Mean of the fused view vectors.
pub fn pool_state(views: &[FusedState]) -> Result<Vec<f64>> {
    let first = views.first().ok_or(Error::Empty("pool_state"))?;
    let d = first.s.len();
    let mut out = vec![0.0; d];
    for v in views {
        if v.s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.s.len() });
        }
        out.iter_mut().zip(&v.s).for_each(|(a, b)| *a += b);
    }
    let n = views.len() as f64;
    out.iter_mut().for_each(|a| *a /= n);
    Ok(out)
}

/// Parameter handles for the token embedding layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletEmbedder {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub time: ParamId,
    pub stop: ParamId,
    pub d_enc: usize,
    pub d_model: usize,
    pub max_timesteps: usize,
}

/// Per-step inputs to the embedding layer. `action` is `None` for STOP,
/// whose input is `x ⊙ e_stop` with the learned `e_stop`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput<'a> {
    pub rtg: f64,
    pub state: &'a [f64],
    pub instruction: &'a [f64],
    pub action: Option<&'a [f64]>,
    pub t: usize,
}

pub(crate) fn normal_tensor(r: &mut StreamRng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let n = crate::tensor::numel(&shape);
    Tensor::new(shape, gaussian(r, n, std))
}

impl TripletEmbedder {
    pub fn new(store: &mut ParameterStore, d_enc: usize, d_model: usize, max_timesteps: usize, r: &mut StreamRng) -> Result<Self> {
        if max_timesteps == 0 {
            return Err(Error::InvalidConfig("max_timesteps must be positive".into()));
        }
        Ok(Self {
            w_r: store.add("embed.w_r", normal_tensor(r, vec![1, d_model], 0.02)?)?,
            b_r: store.add("embed.b_r", Tensor::zeros(vec![d_model]))?,
            w_s: store.add("embed.w_s", normal_tensor(r, vec![d_enc, d_model], 0.02)?)?,
            b_s: store.add("embed.b_s", Tensor::zeros(vec![d_model]))?,
            w_a: store.add("embed.w_a", normal_tensor(r, vec![d_enc, d_model], 0.02)?)?,
            b_a: store.add("embed.b_a", Tensor::zeros(vec![d_model]))?,
            time: store.add("embed.time", normal_tensor(r, vec![max_timesteps, d_model], 0.02)?)?,
            stop: store.add("embed.stop", normal_tensor(r, vec![d_enc], 1.0)?)?,
            d_enc,
            d_model,
            max_timesteps,
        })
    }

    /// Look up the parameters by name in an existing store.
    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let w_s = store.id("embed.w_s")?;
        let time = store.id("embed.time")?;
        let shape = &store.get(w_s).shape;
        Ok(Self {
            w_r: store.id("embed.w_r")?,
            b_r: store.id("embed.b_r")?,
            w_s,
            b_s: store.id("embed.b_s")?,
            w_a: store.id("embed.w_a")?,
            b_a: store.id("embed.b_a")?,
            time,
            stop: store.id("embed.stop")?,
            d_enc: shape[0],
            d_model: shape[1],
            max_timesteps: store.get(time).shape[0],
        })
    }

    /// Rows of `W_a` inputs: candidate or action vectors, with STOP rows
    /// replaced by `x ⊙ e_stop`.
    pub fn action_inputs(&self, tape: &mut Tape, rows: &[(Option<&[f64]>, &[f64])]) -> Result<Var> {
        let d = self.d_enc;
        let mut plain = Vec::with_capacity(rows.len() * d);
        let mut stop_x = Vec::with_capacity(rows.len() * d);
        let mut any_stop = false;
        for (a, x) in rows {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            match a {
                Some(v) => {
                    if v.len() != d {
                        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
                    }
                    plain.extend_from_slice(v);
                    stop_x.extend(core::iter::repeat(0.0).take(d));
                }
                None => {
                    any_stop = true;
                    plain.extend(core::iter::repeat(0.0).take(d));
                    stop_x.extend_from_slice(x);
                }
            }
        }
        let plain = tape.constant(vec![rows.len(), d], plain)?;
        if !any_stop {
            return Ok(plain);
        }
        let sx = tape.constant(vec![rows.len(), d], stop_x)?;
        let e = tape.param(self.stop)?;
        let stop_rows = tape.mul(sx, e)?;
        tape.add(plain, stop_rows)
    }

    /// `rows · W + b` for the action projection.
    pub fn project_actions(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let w = tape.param(self.w_a)?;
        let b = tape.param(self.b_a)?;
        let y = tape.matmul(inputs, w)?;
        tape.add(y, b)
    }

    /// Embed `steps` into `3 n` tokens laid out `r_0, s_0, a_0, r_1, ...`.
    /// Each token is its projection plus the timestep embedding. When
    /// `last_action` is false the final action token is omitted (`3 n - 1`).
    pub fn embed_steps(&self, tape: &mut Tape, steps: &[StepInput], last_action: bool, return_scale: f64) -> Result<Var> {
        self.embed_windows(tape, &[(steps, last_action)], return_scale)
    }

    /// Several windows embedded at once and stacked in order, each laid out
    /// as in [`TripletEmbedder::embed_steps`].
    pub fn embed_windows(&self, tape: &mut Tape, windows: &[(&[StepInput], bool)], return_scale: f64) -> Result<Var> {
        let n: usize = windows.iter().map(|w| w.0.len()).sum();
        if n == 0 || windows.iter().any(|w| w.0.is_empty()) {
            return Err(Error::Empty("embed_steps"));
        }
        let d = self.d_enc;
        let mut rt = Vec::with_capacity(n);
        let mut st = Vec::with_capacity(n * d);
        let mut ts = Vec::with_capacity(n);
        let mut rows: Vec<(Option<&[f64]>, &[f64])> = Vec::with_capacity(n);
        for s in windows.iter().flat_map(|w| w.0.iter()) {
            if s.t >= self.max_timesteps {
                return Err(Error::TimestepOutOfRange { t: s.t, max: self.max_timesteps });
            }
            if s.state.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.state.len() });
            }
            rt.push(s.rtg / return_scale);
            st.extend_from_slice(s.state);
            ts.push(s.t);
            rows.push((s.action, s.instruction));
        }
        let r_in = tape.constant(vec![n, 1], rt)?;
        let s_in = tape.constant(vec![n, d], st)?;
        let a_in = self.action_inputs(tape, &rows)?;

        let time = tape.param(self.time)?;
        let vp = tape.embedding_lookup(time, &ts)?;
        let (w_r, b_r) = (tape.param(self.w_r)?, tape.param(self.b_r)?);
        let vr = tape.matmul(r_in, w_r)?;
        let vr = tape.add(vr, b_r)?;
        let vr = tape.add(vr, vp)?;
        let (w_s, b_s) = (tape.param(self.w_s)?, tape.param(self.b_s)?);
        let vs = tape.matmul(s_in, w_s)?;
        let vs = tape.add(vs, b_s)?;
        let vs = tape.add(vs, vp)?;
        let va = self.project_actions(tape, a_in)?;
        let va = tape.add(va, vp)?;
        let all = tape.concat(&[vr, vs, va], 0)?;
        let mut order = Vec::with_capacity(3 * n);
        let mut base = 0;
        for (steps, last_action) in windows {
            let m = steps.len();
            for i in base..base + m {
                order.push(i);
                order.push(n + i);
                if i + 1 < base + m || *last_action {
                    order.push(2 * n + i);
                }
            }
            base += m;
        }
        tape.embedding_lookup(all, &order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::observe::observe;
    use crate::env::world::{generate_world, ViewpointId, WorldConfig};
    use crate::tensor::ParameterStore;
    use rand::SeedableRng;

    fn enc() -> Encoders {
        Encoders::new(EncoderConfig::default(), Vocabulary::new(12)).unwrap()
    }

    #[test]
    fn instruction_norm_and_order_sensitivity() {
        let e = enc();
        let v = *e.vocab();
        let all: Vec<Token> = (0..v.size() as u16).map(Token).collect();
        for a in &all {
            for b in &all {
                let x = e.embed_instruction(&[*a, *b]).unwrap();
                assert!((math::norm(&x.0) - 8.0).abs() < 1e-6);
                assert_eq!(x, e.embed_instruction(&[*a, *b]).unwrap());
                if a != b {
                    assert_ne!(x, e.embed_instruction(&[*b, *a]).unwrap());
                }
            }
        }
        assert_eq!(e.embed_instruction(&[]), Err(Error::Empty("instruction")));
    }

    #[test]
    fn view_embedding_contract() {
        let e = enc();
        let zero = vec![0.0; e.raw_dim()];
        let o = e.embed_view(&zero).unwrap();
        let want: Vec<f64> = e.bias().iter().map(|b| math::tanh(*b)).collect();
        assert_eq!(o.0, want);
        assert!(e.embed_view(&[0.0; 3]).is_err());

        let g = generate_world(0, 1, &WorldConfig::default()).unwrap();
        for v in 0..g.len() as u32 {
            let obs = observe(&g, ViewpointId(v), 12, 0).unwrap();
            let embs: Vec<_> = obs.navigable.iter().map(|n| e.embed_view(&obs.views[n.view as usize].feature).unwrap()).collect();
            for i in 0..embs.len() {
                assert_eq!(embs[i], e.embed_view(&obs.views[obs.navigable[i].view as usize].feature).unwrap());
                for j in i + 1..embs.len() {
                    assert_ne!(embs[i], embs[j]);
                }
            }
        }
    }

    #[test]
    fn fuse_identities() {
        let o = ViewEmbedding(vec![3.0, 4.0]);
        assert_eq!(fuse(&InstructionEmbedding(vec![1.0, 1.0]), &o).unwrap().s, o.0);
        assert_eq!(fuse(&InstructionEmbedding(vec![0.0, 0.0]), &o).unwrap().s, vec![0.0, 0.0]);
        assert_eq!(fuse(&InstructionEmbedding(vec![2.0, -1.0]), &o).unwrap().s, vec![6.0, -4.0]);
        assert!(fuse(&InstructionEmbedding(vec![1.0]), &o).is_err());
        let a = fuse(&InstructionEmbedding(vec![0.3, -1.7]), &ViewEmbedding(vec![2.1, 0.9])).unwrap();
        let b = fuse(&InstructionEmbedding(vec![2.1, 0.9]), &ViewEmbedding(vec![0.3, -1.7])).unwrap();
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn pooling() {
        let f = |v: Vec<f64>| FusedState { s: v, view_index: None, is_stop_candidate: false };
        assert_eq!(pool_state(&[f(vec![1.0, 2.0])]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool_state(&[f(vec![1.0, -2.0]), f(vec![-1.0, 2.0])]).unwrap(), vec![0.0, 0.0]);
        assert!(pool_state(&[]).is_err());
    }

    fn embedder(max_t: usize) -> (ParameterStore, TripletEmbedder) {
        let mut store = ParameterStore::new();
        let mut r = StreamRng::seed_from_u64(1);
        let e = TripletEmbedder::new(&mut store, 4, 6, max_t, &mut r).unwrap();
        (store, e)
    }

    #[test]
    fn timestep_shift_is_additive() {
        let (store, e) = embedder(3);
        let state = [0.1, -0.2, 0.3, 0.4];
        let x = [1.0, -1.0, 1.0, 1.0];
        let act = [0.5, 0.5, -0.5, 0.0];
        let run = |t: usize| {
            let mut tape = Tape::with_store(&store);
            let s = StepInput { rtg: 1.5, state: &state, instruction: &x, action: Some(&act), t };
            let v = e.embed_steps(&mut tape, &[s], true, 1.0).unwrap();
            tape.value(v).to_vec()
        };
        let (a, b) = (run(0), run(1));
        let time = &store.get(e.time).values;
        for tok in 0..3 {
            for j in 0..6 {
                let diff = b[tok * 6 + j] - a[tok * 6 + j];
                assert!((diff - (time[6 + j] - time[j])).abs() < 1e-15);
            }
        }
        let mut tape = Tape::with_store(&store);
        let s = StepInput { rtg: 0.0, state: &state, instruction: &x, action: Some(&act), t: 3 };
        assert_eq!(e.embed_steps(&mut tape, &[s], true, 1.0), Err(Error::TimestepOutOfRange { t: 3, max: 3 }));
    }

    #[test]
    fn zero_return_gives_bias_plus_time() {
        let (mut store, e) = embedder(2);
        store.values_mut(e.b_r).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let mut tape = Tape::with_store(&store);
        let z = [0.0; 4];
        let s = StepInput { rtg: 0.0, state: &z, instruction: &z, action: None, t: 0 };
        let v = e.embed_steps(&mut tape, &[s], false, 1.0).unwrap();
        assert_eq!(tape.shape(v), &[2, 6]);
        let time = &store.get(e.time).values;
        for j in 0..6 {
            assert_eq!(tape.value(v)[j], j as f64 + time[j]);
        }
    }

    #[test]
    fn state_weight_gradient_matches_finite_differences() {
        let (store, e) = embedder(2);
        let state = [0.3, -0.7, 0.2, 0.9];
        let x = [1.0, -1.0, 0.5, 2.0];
        let probe: Vec<f64> = (0..18).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let f = |st: &ParameterStore| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::with_store(st);
            let s = StepInput { rtg: 0.7, state: &state, instruction: &x, action: None, t: 1 };
            let v = e.embed_steps(&mut tape, &[s], true, 1.0).unwrap();
            let p = tape.constant(vec![3, 6], probe.clone()).unwrap();
            let y = tape.mul(v, p).unwrap();
            let l = tape.sum(y).unwrap();
            let val = tape.scalar(l);
            let g = tape.backward(l).unwrap();
            (val, g.param(e.w_s))
        };
        let (_, g) = f(&store);
        let g = g.unwrap();
        let h = 1e-4;
        for i in 0..g.len() {
            let mut plus = store.clone();
            plus.values_mut(e.w_s)[i] += h;
            let mut minus = store.clone();
            minus.values_mut(e.w_s)[i] -= h;
            let num = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "{} vs {}", g[i], num);
        }
    }
}
