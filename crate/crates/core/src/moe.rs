//! Expert bank, feature-sharing local gate and the client lower bound.

use crate::error::{Error, Result};
use crate::numerics::{
    accumulate_backward, forward, log_softmax, rng, softmax, Block, ForwardCache, MlpSpec, ParamVector,
};

/// Gate log-probabilities are floored at `ln(1e-12)` inside the bound.
pub const LOG_GATE_FLOOR: f64 = -27.631_021_115_928_547;

const SIMPLEX_TOL: f64 = 1e-9;

/// K experts sharing one MLP layout. A slot is `None` when the expert was
/// not transmitted to this holder (pruned).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub spec: MlpSpec,
    pub experts: Vec<Option<ParamVector>>,
}

impl ExpertBank {
    /// Expert `k` is drawn from the `init` stream at path `[k]`.
    pub fn init(spec: MlpSpec, k: usize, seed: u64) -> Self {
        assert!(k >= 1, "need at least one expert");
        let experts = (0..k)
            .map(|i| Some(spec.init(&mut rng::stream(seed, "init", &[i as u64]))))
            .collect();
        ExpertBank { spec, experts }
    }

    pub fn from_experts(spec: MlpSpec, experts: Vec<ParamVector>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Contract("expert bank needs at least one expert".into()));
        }
        for e in &experts {
            spec.check_params(e)?;
        }
        Ok(ExpertBank {
            spec,
            experts: experts.into_iter().map(Some).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, k: usize) -> Option<&ParamVector> {
        self.experts[k].as_ref()
    }

    pub fn present(&self) -> Vec<bool> {
        self.experts.iter().map(Option::is_some).collect()
    }

    pub fn is_full(&self) -> bool {
        self.experts.iter().all(Option::is_some)
    }

    /// Copy holding only the experts with `keep[k]`.
    pub fn restrict(&self, keep: &[bool]) -> ExpertBank {
        ExpertBank {
            spec: self.spec.clone(),
            experts: self
                .experts
                .iter()
                .zip(keep)
                .map(|(e, &k)| if k { e.clone() } else { None })
                .collect(),
        }
    }

    /// Number of scalars held by present experts.
    pub fn present_params(&self) -> usize {
        self.experts.iter().flatten().map(ParamVector::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.experts.iter().flatten().all(ParamVector::is_finite)
    }
}

/// Per-client gate parameters: mixing logits for the feature average, and the
/// linear map `A` (stored row-major, `dim x K`) with bias `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGate {
    pub pi_logits: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    dim: usize,
}

impl LocalGate {
    /// Zero gate: uniform mixing and uniform output.
    pub fn new(k: usize, dim: usize) -> Self {
        LocalGate {
            pi_logits: vec![0.0; k],
            a: vec![0.0; dim * k],
            b: vec![0.0; k],
            dim,
        }
    }

    pub fn for_bank(bank: &ExpertBank) -> Self {
        Self::new(bank.k(), bank.spec.penultimate_dim())
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pi(&self) -> Vec<f64> {
        softmax(&self.pi_logits)
    }

    pub fn axpy(&mut self, alpha: f64, other: &LocalGate) {
        assert_eq!((self.k(), self.dim), (other.k(), other.dim));
        for (x, y) in self.pi_logits.iter_mut().zip(&other.pi_logits) {
            *x += alpha * y;
        }
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += alpha * y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.pi_logits
            .iter_mut()
            .chain(self.a.iter_mut())
            .chain(self.b.iter_mut())
            .for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.pi_logits.iter().chain(&self.a).chain(&self.b).all(|v| v.is_finite())
    }

    pub fn to_params(&self) -> ParamVector {
        let k = self.k();
        ParamVector::new(vec![
            Block::new("gate.pi_logits", vec![k], self.pi_logits.clone()).unwrap(),
            Block::new("gate.A", vec![self.dim, k], self.a.clone()).unwrap(),
            Block::new("gate.b", vec![k], self.b.clone()).unwrap(),
        ])
    }

    pub fn from_params(p: &ParamVector) -> Result<Self> {
        let get = |name: &str| {
            p.block(name).ok_or_else(|| Error::Format {
                what: "gate parameters",
                detail: format!("missing block {name}"),
            })
        };
        let pi = get("gate.pi_logits")?;
        let a = get("gate.A")?;
        let b = get("gate.b")?;
        let k = pi.values.len();
        if a.shape.len() != 2 || a.shape[1] != k || b.values.len() != k {
            return Err(Error::Layout("inconsistent gate block shapes".into()));
        }
        Ok(LocalGate {
            pi_logits: pi.values.clone(),
            a: a.values.clone(),
            b: b.values.clone(),
            dim: a.shape[0],
        })
    }
}

/// Everything computed on one input by the experts and the gate.
#[derive(Debug, Clone)]
pub struct MoeForward {
    pub expert_logits: Vec<Option<Vec<f64>>>,
    pub expert_caches: Vec<Option<ForwardCache>>,
    /// Feature-mixing weights, renormalized over present experts.
    pub mix: Vec<f64>,
    pub features: Vec<f64>,
    pub gate_logits: Vec<f64>,
    pub gate_log_probs: Vec<f64>,
}

impl MoeForward {
    pub fn gate_probs(&self) -> Vec<f64> {
        softmax(&self.gate_logits)
    }

    /// `log p(y | x, z = k)`; `None` for absent experts.
    pub fn expert_log_lik(&self, k: usize, y: usize) -> Option<f64> {
        self.expert_logits[k].as_ref().map(|l| log_softmax(l)[y])
    }

    /// Per-expert `log p(y|x,z) + log p(z|x,s)` over present experts, with the
    /// gate term floored.
    pub fn log_joints(&self, y: usize) -> Vec<Option<f64>> {
        (0..self.gate_logits.len())
            .map(|k| {
                self.expert_log_lik(k, y)
                    .map(|ll| ll + self.gate_log_probs[k].max(LOG_GATE_FLOOR))
            })
            .collect()
    }
}

/// Softmax of `logits` restricted to `present` (zero elsewhere). Identical to
/// a plain softmax when everything is present.
fn masked_softmax(logits: &[f64], present: &[bool]) -> Vec<f64> {
    if present.iter().all(|&p| p) {
        return softmax(logits);
    }
    let sub: Vec<f64> = logits
        .iter()
        .zip(present)
        .filter(|(_, &p)| p)
        .map(|(&l, _)| l)
        .collect();
    let sm = softmax(&sub);
    let mut it = sm.into_iter();
    present
        .iter()
        .map(|&p| if p { it.next().unwrap() } else { 0.0 })
        .collect()
}

pub fn moe_forward(bank: &ExpertBank, gate: &LocalGate, x: &[f64]) -> Result<MoeForward> {
    let k = bank.k();
    if gate.k() != k {
        return Err(Error::dim("gate expert count", k, gate.k()));
    }
    let dim = bank.spec.penultimate_dim();
    if gate.dim() != dim {
        return Err(Error::dim("gate feature dim", dim, gate.dim()));
    }
    if !bank.experts.iter().any(Option::is_some) {
        return Err(Error::Contract("no expert present".into()));
    }
    let mut expert_logits = Vec::with_capacity(k);
    let mut expert_caches = Vec::with_capacity(k);
    for e in &bank.experts {
        match e {
            Some(p) => {
                let (logits, cache) = forward(&bank.spec, p, x)?;
                expert_logits.push(Some(logits));
                expert_caches.push(Some(cache));
            }
            None => {
                expert_logits.push(None);
                expert_caches.push(None);
            }
        }
    }
    let (mix, features, gate_logits) = gate_pass(&expert_caches, gate, &bank.present());
    let gate_log_probs = log_softmax(&gate_logits);
    Ok(MoeForward {
        expert_logits,
        expert_caches,
        mix,
        features,
        gate_logits,
        gate_log_probs,
    })
}

fn gate_pass(caches: &[Option<ForwardCache>], gate: &LocalGate, present: &[bool]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = gate.k();
    let dim = gate.dim();
    let mix = masked_softmax(&gate.pi_logits, present);
    let mut features = vec![0.0; dim];
    for (w, cache) in mix.iter().zip(caches) {
        if let Some(c) = cache {
            for (f, h) in features.iter_mut().zip(c.penultimate()) {
                *f += w * h;
            }
        }
    }
    let mut gate_logits = gate.b.clone();
    for d in 0..dim {
        let hd = features[d];
        let row = &gate.a[d * k..(d + 1) * k];
        for j in 0..k {
            gate_logits[j] += row[j] * hd;
        }
    }
    (mix, features, gate_logits)
}

/// Gate probabilities of another client's gate on the experts already run in `fwd`.
pub fn regate(fwd: &MoeForward, gate: &LocalGate) -> Result<Vec<f64>> {
    if gate.k() != fwd.gate_logits.len() || gate.dim() != fwd.features.len() {
        return Err(Error::dim("gate shape", fwd.gate_logits.len(), gate.k()));
    }
    let present: Vec<bool> = fwd.expert_caches.iter().map(Option::is_some).collect();
    Ok(softmax(&gate_pass(&fwd.expert_caches, gate, &present).2))
}

/// `p(z | x, s)` over all K experts.
pub fn gate_probs(bank: &ExpertBank, gate: &LocalGate, x: &[f64]) -> Result<(Vec<f64>, MoeForward)> {
    let fwd = moe_forward(bank, gate, x)?;
    Ok((fwd.gate_probs(), fwd))
}

/// Mixes per-expert predictives with `p_z`, renormalizing `p_z` over present experts.
pub fn mix_predictive(fwd: &MoeForward, p_z: &[f64]) -> Vec<f64> {
    let present: Vec<bool> = fwd.expert_logits.iter().map(Option::is_some).collect();
    let full = present.iter().all(|&p| p);
    let mass: f64 = if full {
        1.0
    } else {
        p_z.iter().zip(&present).filter(|(_, &p)| p).map(|(v, _)| v).sum()
    };
    let n_present = present.iter().filter(|&&p| p).count() as f64;
    let mut out: Vec<f64> = Vec::new();
    for (k, logits) in fwd.expert_logits.iter().enumerate() {
        if let Some(l) = logits {
            let probs = softmax(l);
            if out.is_empty() {
                out = vec![0.0; probs.len()];
            }
            // Degenerate gate mass on absent experts only: fall back to uniform.
            let w = if mass > 0.0 { p_z[k] / mass } else { 1.0 / n_present };
            for (o, p) in out.iter_mut().zip(probs) {
                *o += w * p;
            }
        }
    }
    out
}

/// `p(y | x, s) = sum_z p(y | x, z) p(z | x, s)`.
pub fn mixture_predict(bank: &ExpertBank, gate: &LocalGate, x: &[f64]) -> Result<Vec<f64>> {
    let fwd = moe_forward(bank, gate, x)?;
    Ok(mix_predictive(&fwd, &fwd.gate_probs()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BoundOptions {
    /// Let the gate term backpropagate into expert features. Off by default:
    /// expert updates are then driven only by their likelihood term.
    pub gate_through_features: bool,
}

/// Value and gradient (ascent direction) of the client bound on one batch.
#[derive(Debug, Clone)]
pub struct BoundGrad {
    pub bound: f64,
    pub grad_bank: Vec<Option<ParamVector>>,
    pub grad_gate: LocalGate,
}

fn check_row(row: &[f64], mask: Option<&[bool]>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for (k, &v) in row.iter().enumerate() {
        let counted = mask.map_or(true, |m| m[k]);
        if !v.is_finite() || v < -SIMPLEX_TOL {
            return Err(Error::Contract(format!("{what} has invalid entry {v}")));
        }
        if counted {
            sum += v;
        }
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Adds `weight * d log p(y|x)/d params` for one example.
pub(crate) fn accumulate_loglik_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    logits: &[f64],
    cache: &ForwardCache,
    y: usize,
    weight: f64,
    extra_penultimate: Option<&[f64]>,
    acc: &mut ParamVector,
) -> Result<()> {
    let p = softmax(logits);
    let grad_logits: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(j, pj)| weight * (if j == y { 1.0 } else { 0.0 } - pj))
        .collect();
    accumulate_backward(spec, params, cache, &grad_logits, extra_penultimate, acc)
}

/// Bound with the same posterior rows for the likelihood and gate terms.
pub fn lower_bound_batch(
    bank: &ExpertBank,
    gate: &LocalGate,
    rows: &[Vec<f64>],
    xs: &[&[f64]],
    ys: &[usize],
    opts: BoundOptions,
) -> Result<BoundGrad> {
    let forwards = xs
        .iter()
        .map(|x| moe_forward(bank, gate, x))
        .collect::<Result<Vec<_>>>()?;
    lower_bound_from_forwards(bank, gate, &forwards, ys, rows, rows, opts)
}

/// Mean over the batch of
/// `sum_z lik_row[z] log p(y|x,z) + sum_z gate_row[z] log p(z|x,s)`
/// and its gradient with respect to the present experts and the gate.
///
/// `lik_rows` must lie on the simplex over present experts, `gate_rows` over
/// all K. The entropy of q does not depend on experts or gate and is omitted.
pub fn lower_bound_from_forwards(
    bank: &ExpertBank,
    gate: &LocalGate,
    forwards: &[MoeForward],
    ys: &[usize],
    lik_rows: &[Vec<f64>],
    gate_rows: &[Vec<f64>],
    opts: BoundOptions,
) -> Result<BoundGrad> {
    let n = forwards.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if ys.len() != n || lik_rows.len() != n || gate_rows.len() != n {
        return Err(Error::dim("batch rows", n, ys.len().min(lik_rows.len()).min(gate_rows.len())));
    }
    let k = bank.k();
    let present = bank.present();
    let dim = gate.dim();
    let mut grad_bank: Vec<Option<ParamVector>> = bank
        .experts
        .iter()
        .map(|e| e.as_ref().map(ParamVector::zeros_like))
        .collect();
    let mut grad_gate = LocalGate::new(k, dim);
    let mut bound = 0.0;

    for i in 0..n {
        let fwd = &forwards[i];
        let y = ys[i];
        let lik = &lik_rows[i];
        let qg = &gate_rows[i];
        if lik.len() != k || qg.len() != k {
            return Err(Error::dim("posterior row", k, lik.len().min(qg.len())));
        }
        check_row(lik, Some(&present), "likelihood posterior row")?;
        check_row(qg, None, "gate posterior row")?;

        // Gate term.
        let p = fwd.gate_probs();
        let mut dg = vec![0.0; k];
        let mut unfloored_mass = 0.0;
        for j in 0..k {
            let lp = fwd.gate_log_probs[j];
            if lp > LOG_GATE_FLOOR {
                unfloored_mass += qg[j];
                bound += qg[j] * lp;
            } else {
                bound += qg[j] * LOG_GATE_FLOOR;
            }
        }
        for j in 0..k {
            let own = if fwd.gate_log_probs[j] > LOG_GATE_FLOOR { qg[j] } else { 0.0 };
            dg[j] = own - p[j] * unfloored_mass;
        }
        let mut grad_features = vec![0.0; dim];
        for d in 0..dim {
            let hd = fwd.features[d];
            let row = &gate.a[d * k..(d + 1) * k];
            let grow = &mut grad_gate.a[d * k..(d + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                grow[j] += hd * dg[j];
                acc += row[j] * dg[j];
            }
            grad_features[d] = acc;
        }
        for j in 0..k {
            grad_gate.b[j] += dg[j];
        }
        let mut u = vec![0.0; k];
        let mut u_bar = 0.0;
        for j in 0..k {
            if let Some(c) = &fwd.expert_caches[j] {
                let mut s = 0.0;
                for (h, g) in c.penultimate().iter().zip(&grad_features) {
                    s += h * g;
                }
                u[j] = s;
                u_bar += fwd.mix[j] * s;
            }
        }
        for j in 0..k {
            if present[j] {
                grad_gate.pi_logits[j] += fwd.mix[j] * (u[j] - u_bar);
            }
        }

        // Expert likelihood terms.
        for j in 0..k {
            let (Some(params), Some(logits), Some(cache)) =
                (bank.expert(j), &fwd.expert_logits[j], &fwd.expert_caches[j])
            else {
                continue;
            };
            bound += lik[j] * log_softmax(logits)[y];
            let extra: Option<Vec<f64>> = opts
                .gate_through_features
                .then(|| grad_features.iter().map(|g| fwd.mix[j] * g).collect());
            let acc = grad_bank[j].as_mut().unwrap();
            accumulate_loglik_grad(&bank.spec, params, logits, cache, y, lik[j], extra.as_deref(), acc)?;
        }
    }

    let inv = 1.0 / n as f64;
    for g in grad_bank.iter_mut().flatten() {
        g.scale(inv);
    }
    grad_gate.scale(inv);
    Ok(BoundGrad {
        bound: bound * inv,
        grad_bank,
        grad_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bank(widths: Vec<usize>, k: usize, seed: u64) -> ExpertBank {
        ExpertBank::init(MlpSpec::new(widths).unwrap(), k, seed)
    }

    fn random_gate(k: usize, dim: usize, seed: u64) -> LocalGate {
        let mut r = rng::stream(seed, "gate", &[]);
        let mut g = LocalGate::new(k, dim);
        g.pi_logits.iter_mut().chain(g.a.iter_mut()).chain(g.b.iter_mut()).for_each(|v| *v = r.random_range(-1.0..1.0));
        g
    }

    #[test]
    fn zero_gate_is_uniform() {
        let b = bank(vec![3, 5, 2], 4, 1);
        let mut gate = LocalGate::for_bank(&b);
        gate.pi_logits = vec![3.0, -1.0, 0.5, 2.0];
        let (p, _) = gate_probs(&b, &gate, &[0.1, 0.2, 0.3]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_gate_is_one() {
        let b = bank(vec![3, 5, 2], 1, 1);
        let gate = random_gate(1, 5, 4);
        let (p, _) = gate_probs(&b, &gate, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(p, vec![1.0]);
        let pred = mixture_predict(&b, &gate, &[0.1, 0.2, 0.3]).unwrap();
        let (logits, _) = forward(&b.spec, b.expert(0).unwrap(), &[0.1, 0.2, 0.3]).unwrap();
        let direct = softmax(&logits);
        for (a, d) in pred.iter().zip(direct) {
            assert!((a - d).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_mixing_weight_selects_expert_features() {
        let b = bank(vec![3, 4, 2], 3, 2);
        let x = [0.5, -0.25, 1.0];
        let mut gate = random_gate(3, 4, 8);
        gate.pi_logits = vec![-40.0, 40.0, -40.0];
        let (p, _) = gate_probs(&b, &gate, &x).unwrap();
        // Hand composition with h = h_1 exactly.
        let (_, cache) = forward(&b.spec, b.expert(1).unwrap(), &x).unwrap();
        let h = cache.penultimate();
        let logits: Vec<f64> = (0..3)
            .map(|j| gate.b[j] + (0..4).map(|d| gate.a[d * 3 + j] * h[d]).sum::<f64>())
            .collect();
        let expect = softmax(&logits);
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_invariant_to_bias_shift() {
        let b = bank(vec![3, 4, 2], 3, 2);
        let x = [0.5, -0.25, 1.0];
        let gate = random_gate(3, 4, 9);
        let mut shifted = gate.clone();
        shifted.b.iter_mut().for_each(|v| *v += 17.5);
        let (p1, _) = gate_probs(&b, &gate, &x).unwrap();
        let (p2, _) = gate_probs(&b, &shifted, &x).unwrap();
        for (a, c) in p1.iter().zip(p2) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_of_two_hand_values() {
        // Two single-layer experts with logits ln(.8),ln(.2) and ln(.2),ln(.8).
        let spec = MlpSpec::new(vec![1, 2]).unwrap();
        let mut e1 = spec.zeros();
        e1.block_mut("layer0.bias").unwrap().values = vec![0.8f64.ln(), 0.2f64.ln()];
        let mut e2 = spec.zeros();
        e2.block_mut("layer0.bias").unwrap().values = vec![0.2f64.ln(), 0.8f64.ln()];
        let b = ExpertBank::from_experts(spec, vec![e1, e2]).unwrap();
        let mut gate = LocalGate::for_bank(&b);
        gate.b = vec![0.3f64.ln(), 0.7f64.ln()];
        let p = mixture_predict(&b, &gate, &[1.0]).unwrap();
        assert!((p[0] - 0.38).abs() < 1e-12 && (p[1] - 0.62).abs() < 1e-12);
    }

    #[test]
    fn one_hot_gate_reproduces_expert() {
        let b = bank(vec![2, 3, 3], 3, 6);
        let mut gate = LocalGate::for_bank(&b);
        gate.b = vec![-1e3, 1e3, -1e3];
        let x = [0.3, 0.9];
        let p = mixture_predict(&b, &gate, &x).unwrap();
        let (l, _) = forward(&b.spec, b.expert(1).unwrap(), &x).unwrap();
        for (a, e) in p.iter().zip(softmax(&l)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_bank_renormalizes() {
        let b = bank(vec![2, 3, 3], 3, 6).restrict(&[true, false, true]);
        let gate = random_gate(3, 3, 1);
        let p = mixture_predict(&b, &gate, &[0.2, -0.4]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let fwd = moe_forward(&b, &gate, &[0.2, -0.4]).unwrap();
        assert_eq!(fwd.mix[1], 0.0);
        assert!((fwd.mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn off_simplex_rows_are_rejected() {
        let b = bank(vec![2, 3, 2], 2, 1);
        let gate = LocalGate::for_bank(&b);
        let x: &[f64] = &[0.1, 0.2];
        let err = lower_bound_batch(&b, &gate, &[vec![0.6, 0.6]], &[x], &[0], BoundOptions::default());
        assert!(matches!(err, Err(Error::Contract(_))));
        assert!(lower_bound_batch(&b, &gate, &[], &[], &[], BoundOptions::default()).is_err());
    }

    #[test]
    fn single_expert_bound_is_mean_log_likelihood() {
        let b = bank(vec![3, 4, 3], 1, 5);
        let gate = random_gate(1, 4, 2);
        let xs: Vec<Vec<f64>> = vec![vec![0.1, 0.5, -0.3], vec![1.0, -1.0, 0.2], vec![0.0, 0.3, 0.9]];
        let ys = [0, 2, 1];
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let rows = vec![vec![1.0]; 3];
        let out = lower_bound_batch(&b, &gate, &rows, &xr, &ys, BoundOptions::default()).unwrap();
        let mut ll = 0.0;
        let mut ce_grad = b.spec.zeros();
        for (x, &y) in xs.iter().zip(&ys) {
            let (logits, cache) = forward(&b.spec, b.expert(0).unwrap(), x).unwrap();
            ll += log_softmax(&logits)[y];
            let p = softmax(&logits);
            let g: Vec<f64> = p.iter().enumerate().map(|(j, pj)| pj - if j == y { 1.0 } else { 0.0 }).collect();
            accumulate_backward(&b.spec, b.expert(0).unwrap(), &cache, &g, None, &mut ce_grad).unwrap();
        }
        ce_grad.scale(1.0 / 3.0);
        assert!((out.bound - ll / 3.0).abs() < 1e-12);
        let ascent = out.grad_bank[0].as_ref().unwrap();
        assert!(ascent.scaled(-1.0).max_abs_diff(&ce_grad) < 1e-12);
        assert!(out.grad_gate.to_params().values().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_experts_with_uniform_gate() {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let e = spec.init(&mut rng::stream(4, "x", &[]));
        let b = ExpertBank::from_experts(spec.clone(), vec![e.clone(), e.clone()]).unwrap();
        let gate = LocalGate::for_bank(&b);
        let xs = [vec![0.3, 0.1], vec![-0.5, 0.7]];
        let ys = [1, 0];
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let out = lower_bound_batch(&b, &gate, &vec![vec![0.5, 0.5]; 2], &xr, &ys, BoundOptions::default()).unwrap();
        let mean_ll: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, &y)| log_softmax(&forward(&spec, &e, x).unwrap().0)[y])
            .sum::<f64>()
            / 2.0;
        assert!((out.bound - (mean_ll + 0.5f64.ln())).abs() < 1e-12);
    }

    fn joint_fd_check(opts: BoundOptions, seed: u64) {
        let mut r = rng::stream(seed, "bound-fd", &[]);
        let b = bank(vec![3, 5, 4, 3], 3, seed);
        let gate = random_gate(3, 4, seed + 1);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| softmax(&(0..3).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let out = lower_bound_batch(&b, &gate, &rows, &xr, &ys, opts).unwrap();
        let f = |bb: &ExpertBank, gg: &LocalGate| lower_bound_batch(bb, gg, &rows, &xr, &ys, opts).unwrap().bound;
        let h = 1e-5;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for k in 0..3 {
            let p = b.expert(k).unwrap();
            for bi in 0..p.blocks().len() {
                for vi in 0..p.blocks()[bi].values.len() {
                    let mut plus = b.clone();
                    plus.experts[k].as_mut().unwrap().blocks_mut()[bi].values[vi] += h;
                    let mut minus = b.clone();
                    minus.experts[k].as_mut().unwrap().blocks_mut()[bi].values[vi] -= h;
                    num.push((f(&plus, &gate) - f(&minus, &gate)) / (2.0 * h));
                    ana.push(out.grad_bank[k].as_ref().unwrap().blocks()[bi].values[vi]);
                }
            }
        }
        let gp = gate.to_params();
        let gg = out.grad_gate.to_params();
        for bi in 0..gp.blocks().len() {
            for vi in 0..gp.blocks()[bi].values.len() {
                let mut plus = gp.clone();
                plus.blocks_mut()[bi].values[vi] += h;
                let mut minus = gp.clone();
                minus.blocks_mut()[bi].values[vi] -= h;
                let gplus = LocalGate::from_params(&plus).unwrap();
                let gminus = LocalGate::from_params(&minus).unwrap();
                num.push((f(&b, &gplus) - f(&b, &gminus)) / (2.0 * h));
                ana.push(gg.blocks()[bi].values[vi]);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }

    #[test]
    fn bound_gradient_matches_finite_differences_with_gate_through_features() {
        joint_fd_check(BoundOptions { gate_through_features: true }, 21);
        joint_fd_check(BoundOptions { gate_through_features: true }, 33);
    }

    #[test]
    fn stop_gradient_drops_only_the_feature_path() {
        // With stop-gradient, expert grads equal the likelihood-only gradient.
        let b = bank(vec![2, 4, 2], 2, 3);
        let gate = random_gate(2, 4, 3);
        let xs = [vec![0.4, -0.2]];
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let rows = vec![vec![0.3, 0.7]];
        let stop = lower_bound_batch(&b, &gate, &rows, &xr, &[1], BoundOptions::default()).unwrap();
        for k in 0..2 {
            let e = b.expert(k).unwrap();
            let (logits, cache) = forward(&b.spec, e, &xs[0]).unwrap();
            let mut g = b.spec.zeros();
            accumulate_loglik_grad(&b.spec, e, &logits, &cache, 1, rows[0][k], None, &mut g).unwrap();
            assert!(g.max_abs_diff(stop.grad_bank[k].as_ref().unwrap()) < 1e-15);
        }
    }

    #[test]
    fn floored_gate_keeps_bound_finite() {
        let b = bank(vec![2, 3, 2], 2, 3);
        let mut gate = LocalGate::for_bank(&b);
        gate.b = vec![0.0, -1e4];
        let x: &[f64] = &[0.2, 0.1];
        let out = lower_bound_batch(&b, &gate, &[vec![0.0, 1.0]], &[x], &[0], BoundOptions::default()).unwrap();
        assert!(out.bound.is_finite());
        assert!(out.grad_gate.is_finite());
    }

    proptest::proptest! {
        #[test]
        fn mixture_sums_to_one(x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, seed in 0u64..1000) {
            let b = bank(vec![2, 6, 5], 3, seed);
            let gate = random_gate(3, 6, seed);
            let p = mixture_predict(&b, &gate, &[x0, x1]).unwrap();
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
