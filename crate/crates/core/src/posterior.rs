//! The global table `q(z | side category)`: closed-form update, dampening,
//! per-shard marginals and the server-side marginal-entropy gradient.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Block, ParamVector};

const ROW_TOL: f64 = 1e-9;
/// Rows are clamped to this value before renormalizing.
pub const PROJECTION_FLOOR: f64 = 1e-6;
/// Marginal masses are floored here before taking logs.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// What discrete side information `q` is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SideInfoKey {
    #[default]
    Label,
    TransformIndex,
}

/// Row-stochastic `categories x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    rows: Vec<Vec<f64>>,
    k: usize,
}

pub type RowMap = BTreeMap<usize, Vec<f64>>;

impl PosteriorTable {
    pub fn uniform(categories: usize, k: usize) -> Self {
        PosteriorTable {
            rows: vec![vec![1.0 / k as f64; k]; categories],
            k,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        if k == 0 {
            return Err(Error::Contract("posterior table needs rows and experts".into()));
        }
        for (c, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::dim("posterior row", k, r.len()));
            }
            check_simplex(r).map_err(|m| Error::Contract(format!("row {c}: {m}")))?;
        }
        Ok(PosteriorTable { rows, k })
    }

    pub fn categories(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.rows[c]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn set_row(&mut self, c: usize, row: Vec<f64>) {
        assert_eq!(row.len(), self.k);
        self.rows[c] = row;
    }

    pub fn to_params(&self) -> ParamVector {
        let values = self.rows.iter().flatten().copied().collect();
        ParamVector::new(vec![Block::new("phi", vec![self.categories(), self.k], values).unwrap()])
    }

    /// Inverse of [`to_params`](Self::to_params); does not check the simplex.
    pub fn from_params_unchecked(p: &ParamVector) -> Result<Self> {
        let b = p.block("phi").ok_or_else(|| Error::Layout("missing phi block".into()))?;
        if b.shape.len() != 2 {
            return Err(Error::Layout("phi block must be 2-d".into()));
        }
        let k = b.shape[1];
        Ok(PosteriorTable {
            rows: b.values.chunks(k).map(<[f64]>::to_vec).collect(),
            k,
        })
    }

    pub fn byte_size(&self) -> usize {
        8 * self.categories() * self.k
    }

    pub fn max_abs_diff(&self, other: &PosteriorTable) -> f64 {
        self.rows
            .iter()
            .flatten()
            .zip(other.rows.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_row_entropy(&self) -> f64 {
        let total: f64 = self.rows.iter().map(|r| entropy(r)).sum();
        total / self.categories() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }

    /// `round,category,expert,prob` rows.
    pub fn write_snapshot<W: Write>(&self, mut w: W, round: usize) -> Result<()> {
        for (c, row) in self.rows.iter().enumerate() {
            for (k, p) in row.iter().enumerate() {
                writeln!(w, "{round},{c},{k},{p:e}")?;
            }
        }
        Ok(())
    }
}

pub const SNAPSHOT_HEADER: &str = "round,category,expert,prob";

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_simplex(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|v| !v.is_finite() || *v < -ROW_TOL) {
        return Err(format!("invalid entries {row:?}"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Closed-form maximizer of the per-category bound for every category present
/// in the batch: `softmax(sum_i log_joint_i / (beta * M_c))`.
pub fn closed_form_phi(log_joints: &[Vec<f64>], side: &[usize], beta: f64) -> Result<RowMap> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::config("beta_entropy", format!("must be > 0, got {beta}")));
    }
    if log_joints.len() != side.len() {
        return Err(Error::dim("side categories", log_joints.len(), side.len()));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (lj, &c) in log_joints.iter().zip(side) {
        if lj.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite log-joint {lj:?}")));
        }
        let entry = sums.entry(c).or_insert_with(|| (vec![0.0; lj.len()], 0));
        if entry.0.len() != lj.len() {
            return Err(Error::dim("log-joint length", entry.0.len(), lj.len()));
        }
        for (s, v) in entry.0.iter_mut().zip(lj) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, m))| {
            let scale = 1.0 / (beta * m as f64);
            let logits: Vec<f64> = sum.iter().map(|s| s * scale).collect();
            (c, softmax(&logits))
        })
        .collect())
}

/// `phi_c <- gamma * phi_c + (1 - gamma) * new_c` for rows in `new`.
pub fn dampen(phi: &mut PosteriorTable, new: &RowMap, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    for (&c, row) in new {
        if c >= phi.categories() || row.len() != phi.k {
            return Err(Error::dim("dampened row", phi.k, row.len()));
        }
        check_simplex(row).map_err(Error::Contract)?;
        for (old, n) in phi.rows[c].iter_mut().zip(row) {
            *old = gamma * *old + (1.0 - gamma) * n;
        }
    }
    Ok(())
}

/// `q(z|s) = sum_c (count_c / N_s) phi_c`.
pub fn marginal_q_z_given_s(phi: &PosteriorTable, counts: &[usize]) -> Result<Vec<f64>> {
    if counts.len() != phi.categories() {
        return Err(Error::dim("category counts", phi.categories(), counts.len()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("marginal needs at least one example".into()));
    }
    let mut out = vec![0.0; phi.k];
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let w = n as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(&phi.rows[c]) {
            *o += w * p;
        }
    }
    Ok(out)
}

fn marginal_over(phi: &PosteriorTable, p_y: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; phi.k];
    for (row, &w) in phi.rows.iter().zip(p_y) {
        for (mk, v) in m.iter_mut().zip(row) {
            *mk += w * v;
        }
    }
    m
}

/// `H(sum_c p_y(c) phi_c)` with masses floored at [`ENTROPY_FLOOR`].
pub fn marginal_entropy(phi: &PosteriorTable, p_y: &[f64]) -> f64 {
    marginal_over(phi, p_y)
        .iter()
        .map(|&m| {
            let m = m.max(ENTROPY_FLOOR);
            -m * m.ln()
        })
        .sum()
}

/// Gradient of [`marginal_entropy`] w.r.t. every table entry:
/// `-p_y(c) (ln m_k + 1)`.
pub fn marginal_entropy_grad(phi: &PosteriorTable, p_y: &[f64]) -> Result<Vec<Vec<f64>>> {
    if p_y.len() != phi.categories() {
        return Err(Error::dim("p(y)", phi.categories(), p_y.len()));
    }
    check_simplex(p_y).map_err(|m| Error::Contract(format!("p(y) {m}")))?;
    let m = marginal_over(phi, p_y);
    let dm: Vec<f64> = m.iter().map(|&mk| -(mk.max(ENTROPY_FLOOR).ln() + 1.0)).collect();
    Ok(p_y
        .iter()
        .map(|&w| dm.iter().map(|d| w * d).collect())
        .collect())
}

/// Clamp every entry to at least [`PROJECTION_FLOOR`] and renormalize rows.
pub fn project_rows(phi: &mut PosteriorTable) {
    for row in phi.rows.iter_mut() {
        for v in row.iter_mut() {
            if !(*v >= PROJECTION_FLOOR) {
                *v = PROJECTION_FLOOR;
            }
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand::Rng;

    /// Per-category objective: sum_k phi_k * logit_k * M - beta * M * sum phi log phi,
    /// divided by M (a positive constant does not move the maximizer).
    fn lagrangian_objective(phi: &[f64], summed: &[f64], m: usize, beta: f64) -> f64 {
        let mf = m as f64;
        phi.iter().zip(summed).map(|(p, s)| p * s).sum::<f64>() / mf - beta * -entropy(phi)
    }

    /// Best point of the barycentric grid with `n` subdivisions (K = 2 or 3).
    fn grid_best(summed: &[f64], m: usize, beta: f64, n: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let nf = n as f64;
        match summed.len() {
            2 => {
                for i in 0..=n {
                    let p = [i as f64 / nf, (n - i) as f64 / nf];
                    best = best.max(lagrangian_objective(&p, summed, m, beta));
                }
            }
            3 => {
                for i in 0..=n {
                    for j in 0..=(n - i) {
                        let p = [i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf];
                        best = best.max(lagrangian_objective(&p, summed, m, beta));
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    #[test]
    fn identical_log_joints_give_uniform_row() {
        let rows = closed_form_phi(&[vec![-1.5; 4], vec![-0.2; 4]], &[0, 0], 0.7).unwrap();
        for v in &rows[&0] {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_example_softmax() {
        let rows = closed_form_phi(&[vec![-1.0, -2.0]], &[3], 1.0).unwrap();
        let r = &rows[&3];
        assert!((r[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((r[1] - 0.2689414213699951).abs() < 1e-12);
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn temperature_limits() {
        let cold = closed_form_phi(&[vec![-1.0, -2.0]], &[0], 0.01).unwrap();
        assert!(cold[&0][0] == 1.0 && cold[&0][1] < 1e-40);
        let hot = closed_form_phi(&[vec![-1.0, -2.0]], &[0], 100.0).unwrap();
        assert!((hot[&0][0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn closed_form_rejects_bad_beta() {
        assert!(matches!(closed_form_phi(&[vec![0.0]], &[0], 0.0), Err(Error::Config { .. })));
        assert!(closed_form_phi(&[vec![0.0]], &[0], -1.0).is_err());
    }

    #[test]
    fn closed_form_beats_simplex_grid() {
        let mut r = rng::stream(17, "grid", &[]);
        for _ in 0..20 {
            let k = r.random_range(2..4);
            let m = r.random_range(1..6);
            let beta = [0.2, 0.8, 1.0][r.random_range(0..3)];
            let ljs: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| r.random_range(-4.0..0.0)).collect()).collect();
            let rows = closed_form_phi(&ljs, &vec![0; m], beta).unwrap();
            let summed: Vec<f64> = (0..k).map(|j| ljs.iter().map(|l| l[j]).sum()).collect();
            let cf = lagrangian_objective(&rows[&0], &summed, m, beta);
            assert!(cf >= grid_best(&summed, m, beta, 200) - 1e-4);
        }
    }

    #[test]
    fn dampen_examples() {
        let base = PosteriorTable::from_rows(vec![vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        let new: RowMap = [(0, vec![0.0, 1.0])].into_iter().collect();
        let mut t = base.clone();
        dampen(&mut t, &new, 1.0).unwrap();
        assert_eq!(t, base);
        let mut t = base.clone();
        dampen(&mut t, &new, 0.0).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0]);
        assert_eq!(t.row(1), base.row(1));
        let mut t = base.clone();
        dampen(&mut t, &new, 0.5).unwrap();
        assert_eq!(t.row(0), &[0.5, 0.5]);
        assert!(dampen(&mut t, &new, 1.5).is_err());
    }

    #[test]
    fn marginal_examples() {
        let u = PosteriorTable::uniform(3, 4);
        assert_eq!(marginal_q_z_given_s(&u, &[5, 0, 1]).unwrap(), vec![0.25; 4]);
        let t = PosteriorTable::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(marginal_q_z_given_s(&t, &[3, 1]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(marginal_q_z_given_s(&t, &[2, 0]).unwrap(), t.row(0));
        assert!(marginal_q_z_given_s(&t, &[0, 0]).is_err());
    }

    #[test]
    fn marginal_matches_per_datapoint_average() {
        let mut r = rng::stream(2, "marg", &[]);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| softmax(&(0..3).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        let t = PosteriorTable::from_rows(rows).unwrap();
        let labels: Vec<usize> = (0..37).map(|_| r.random_range(0..5)).collect();
        let mut counts = vec![0; 5];
        labels.iter().for_each(|&y| counts[y] += 1);
        let fast = marginal_q_z_given_s(&t, &counts).unwrap();
        let mut brute = vec![0.0; 3];
        for &y in &labels {
            for k in 0..3 {
                brute[k] += t.row(y)[k] / labels.len() as f64;
            }
        }
        for (a, b) in fast.iter().zip(brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_gradient_uniform_has_equal_columns() {
        let t = PosteriorTable::uniform(3, 4);
        let p_y = [0.2, 0.3, 0.5];
        let g = marginal_entropy_grad(&t, &p_y).unwrap();
        for (c, row) in g.iter().enumerate() {
            let expect = -p_y[c] * ((0.25f64).ln() + 1.0);
            for v in row {
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut r = rng::stream(8, "hfd", &[]);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|_| softmax(&(0..3).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))
                .collect();
            let t = PosteriorTable::from_rows(rows).unwrap();
            let p_y = softmax(&(0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let g = marginal_entropy_grad(&t, &p_y).unwrap();
            let h = 1e-5;
            let mut diff = 0.0;
            let mut norm = 0.0;
            for c in 0..4 {
                for k in 0..3 {
                    let mut plus = t.clone();
                    plus.rows[c][k] += h;
                    let mut minus = t.clone();
                    minus.rows[c][k] -= h;
                    let fd = (marginal_entropy(&plus, &p_y) - marginal_entropy(&minus, &p_y)) / (2.0 * h);
                    diff += (fd - g[c][k]).powi(2);
                    norm += g[c][k].powi(2);
                }
            }
            assert!((diff / norm).sqrt() < 1e-6);
        }
    }

    #[test]
    fn entropy_ascent_moves_mass_to_unused_expert() {
        let t = PosteriorTable::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let g = marginal_entropy_grad(&t, &[1.0]).unwrap();
        // d H / d phi_{0,1} > d H / d phi_{0,0}: ascent favours expert 2.
        assert!(g[0][1] > g[0][0]);
        let h = 1e-6;
        let mut shifted = t.clone();
        shifted.rows[0] = vec![1.0 - h, h];
        assert!(marginal_entropy(&shifted, &[1.0]) > marginal_entropy(&t, &[1.0]));
    }

    #[test]
    fn projection_examples() {
        let mut t = PosteriorTable {
            rows: vec![vec![1.2, -0.1], vec![0.0, 0.0], vec![0.3, 0.7]],
            k: 2,
        };
        project_rows(&mut t);
        let s = 1.2 + 1e-6;
        assert!((t.rows[0][0] - 1.2 / s).abs() < 1e-15 && (t.rows[0][1] - 1e-6 / s).abs() < 1e-15);
        assert_eq!(t.rows[1], vec![0.5, 0.5]);
        assert!((t.rows[2][0] - 0.3).abs() < 1e-12);
        // Rows already at or above the floor are fixed points.
        let mut r = rng::stream(3, "proj", &[]);
        for _ in 0..50 {
            let row = softmax(&(0..4).map(|_| r.random_range(-8.0..8.0)).collect::<Vec<_>>());
            if row.iter().any(|&v| v < PROJECTION_FLOOR) {
                continue;
            }
            let mut u = PosteriorTable::from_rows(vec![row]).unwrap();
            let once = u.clone();
            project_rows(&mut u);
            assert!(once.max_abs_diff(&u) < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn closed_form_is_shift_invariant(
            a in proptest::collection::vec(-5.0f64..0.0, 3),
            shift in -10.0f64..10.0,
            beta in 0.1f64..3.0,
        ) {
            let r1 = closed_form_phi(&[a.clone()], &[0], beta).unwrap();
            let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let r2 = closed_form_phi(&[b], &[0], beta).unwrap();
            for (x, y) in r1[&0].iter().zip(&r2[&0]) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn row_entropy_nondecreasing_in_beta(
            a in proptest::collection::vec(-5.0f64..0.0, 4),
            b1 in 0.05f64..5.0,
            db in 0.0f64..5.0,
        ) {
            let lo = closed_form_phi(&[a.clone()], &[0], b1).unwrap();
            let hi = closed_form_phi(&[a], &[0], b1 + db).unwrap();
            proptest::prop_assert!(entropy(&hi[&0]) >= entropy(&lo[&0]) - 1e-12);
        }

        #[test]
        fn dampen_stays_on_simplex(
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            gamma in 0.0f64..=1.0,
        ) {
            let mut t = PosteriorTable::from_rows(vec![softmax(&a)]).unwrap();
            let new: RowMap = [(0, softmax(&b))].into_iter().collect();
            dampen(&mut t, &new, gamma).unwrap();
            proptest::prop_assert!(check_simplex(t.row(0)).is_ok());
        }
    }
}
