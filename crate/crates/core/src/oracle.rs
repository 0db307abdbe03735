//! Exact successor-measure machinery on small finite MDPs.
//!
//! Everything here is dense 64-bit linear algebra. State-action pairs are
//! flattened as row `s·k + a`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMDP {
    n: usize,
    k: usize,
    /// `(n·k) × n`, row `s·k + a` is `P(s, a, ·)`.
    p: DMatrix<f64>,
    gamma: f64,
    rho: DVector<f64>,
}

fn check_simplex(row: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for v in row {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{what} has a negative or non-finite entry")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Config(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl FiniteMDP {
    pub fn new(n: usize, k: usize, p: DMatrix<f64>, gamma: f64, rho: DVector<f64>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Config("MDP needs at least one state and action".into()));
        }
        if p.shape() != (n * k, n) || rho.len() != n {
            return Err(Error::Config(format!(
                "transition shape {:?} or ρ length {} does not match n = {n}, k = {k}",
                p.shape(),
                rho.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("discount {gamma} outside (0, 1)")));
        }
        for r in 0..n * k {
            check_simplex(p.row(r).iter().copied(), &format!("P({}, {}, ·)", r / k, r % k))?;
        }
        check_simplex(rho.iter().copied(), "ρ")?;
        if rho.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("ρ must be strictly positive".into()));
        }
        Ok(FiniteMDP { n, k, p, gamma, rho })
    }

    /// Random transitions and data distribution, each row drawn from a flat
    /// Dirichlet.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let p = DMatrix::from_fn(n * k, n, |_, _| rng.sample::<f64, _>(Exp1));
        let p = normalize_rows(p);
        let rho = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(Exp1) + 1e-3);
        let rho = &rho / rho.sum();
        Self::new(n, k, p, gamma, rho)
    }

    pub fn states(&self) -> usize {
        self.n
    }

    pub fn actions(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transitions(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    /// State-to-state kernel `P_π(s, s′) = Σ_a π(a|s) P(s, a, s′)`.
    pub fn state_kernel(&self, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
        self.check_policy(pi)?;
        Ok(DMatrix::from_fn(self.n, self.n, |s, t| {
            (0..self.k).map(|a| pi.probs[(s, a)] * self.p[(s * self.k + a, t)]).sum()
        }))
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.probs.shape() != (self.n, self.k) {
            return Err(Error::Config(format!(
                "policy shape {:?} does not match ({}, {})",
                pi.probs.shape(),
                self.n,
                self.k
            )));
        }
        Ok(())
    }
}

fn normalize_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut r in m.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

/// Row-stochastic `π(a|s)`, shape `n × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for (s, r) in probs.row_iter().enumerate() {
            check_simplex(r.iter().copied(), &format!("π(·|{s})"))?;
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        TabularPolicy {
            probs: DMatrix::from_element(n, k, 1.0 / k as f64),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        TabularPolicy {
            probs: normalize_rows(DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(Exp1))),
        }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

/// `M = P (I − γP_π)⁻¹`, shape `(n·k) × n`: the discounted visitation
/// measure over next states, first term `P(s, a, ·)`.
pub fn exact_successor_measure(mdp: &FiniteMDP, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
    let ppi = mdp.state_kernel(pi)?;
    let a = DMatrix::identity(mdp.n, mdp.n) - ppi * mdp.gamma;
    let inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::numeric("successor_measure", "I − γP_π is singular"))?;
    Ok(&mdp.p * inv)
}

/// `Q = M r`, as a `(n·k)` vector indexed like the rows of `M`.
pub fn q_from_measure(m: &DMatrix<f64>, reward: &DVector<f64>) -> Result<DVector<f64>> {
    if m.ncols() != reward.len() {
        return Err(Error::Config("reward length does not match state count".into()));
    }
    Ok(m * reward)
}

pub fn exact_q(mdp: &FiniteMDP, pi: &TabularPolicy, reward: &DVector<f64>) -> Result<DVector<f64>> {
    q_from_measure(&exact_successor_measure(mdp, pi)?, reward)
}

/// Direct policy evaluation: solve `(I − γP_π) V = r`, then `Q = P V`.
pub fn direct_q(mdp: &FiniteMDP, pi: &TabularPolicy, reward: &DVector<f64>) -> Result<DVector<f64>> {
    if reward.len() != mdp.n {
        return Err(Error::Config("reward length does not match state count".into()));
    }
    let ppi = mdp.state_kernel(pi)?;
    let a = DMatrix::identity(mdp.n, mdp.n) - ppi * mdp.gamma;
    let v = a
        .lu()
        .solve(reward)
        .ok_or_else(|| Error::numeric("policy_evaluation", "I − γP_π is singular"))?;
    Ok(&mdp.p * v)
}

/// Forward table for one embedding: `(n·k) × d`, with its policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTable {
    pub f: DMatrix<f64>,
    pub policy: TabularPolicy,
}

/// Exact expected contrastive TD loss over a finite set of embeddings,
/// with `(s, a) ∼ ρ(s)/k`, `s′ ∼ P(s, a)`, `s⁺ ∼ ρ` and target tables held
/// fixed:
///
/// `Σ_{s,a} D(s,a) [Σ_{s⁺} ρ(s⁺)(F(s,a)ᵀB(s⁺) − γ T(s,a,s⁺))² − 2 Σ_{s′} P(s,a,s′) F(s,a)ᵀB(s′)]`
///
/// where `T(s,a,s⁺) = Σ_{s′} P(s,a,s′) Σ_{a′} π(a′|s′) F̄(s′,a′)ᵀB̄(s⁺)`,
/// averaged over the embeddings.
pub fn expected_fb_loss_with_targets(
    mdp: &FiniteMDP,
    forward: &[ForwardTable],
    b: &DMatrix<f64>,
    target_forward: &[DMatrix<f64>],
    target_b: &DMatrix<f64>,
) -> Result<f64> {
    let (n, k) = (mdp.n, mdp.k);
    if forward.is_empty() || forward.len() != target_forward.len() {
        return Err(Error::Config("need one target table per forward table".into()));
    }
    if b.nrows() != n || target_b.shape() != b.shape() {
        return Err(Error::Config("backward tables must have one row per state".into()));
    }
    let d = b.ncols();
    let mut total = 0.0;
    for (ft, fbar) in forward.iter().zip(target_forward) {
        mdp.check_policy(&ft.policy)?;
        if ft.f.shape() != (n * k, d) || fbar.shape() != (n * k, d) {
            return Err(Error::Config("forward table shape mismatch".into()));
        }
        // predicted measure density and its target over all (s, a, s⁺)
        let m = &ft.f * b.transpose();
        let mbar = fbar * target_b.transpose();
        let pi_mbar = DMatrix::from_fn(n, n, |s, t| {
            (0..k).map(|a| ft.policy.probs[(s, a)] * mbar[(s * k + a, t)]).sum()
        });
        let target = &mdp.p * pi_mbar;
        let mut loss = 0.0;
        for r in 0..n * k {
            let weight = mdp.rho[r / k] / k as f64;
            let mut row = 0.0;
            for t in 0..n {
                let e = m[(r, t)] - mdp.gamma * target[(r, t)];
                row += mdp.rho[t] * e * e - 2.0 * mdp.p[(r, t)] * m[(r, t)];
            }
            loss += weight * row;
        }
        total += loss;
    }
    Ok(total / forward.len() as f64)
}

/// The loss with target tables equal to the online ones.
pub fn expected_fb_loss(mdp: &FiniteMDP, forward: &[ForwardTable], b: &DMatrix<f64>) -> Result<f64> {
    let targets: Vec<_> = forward.iter().map(|t| t.f.clone()).collect();
    expected_fb_loss_with_targets(mdp, forward, b, &targets, b)
}

/// Best rank-`d` factorization `M/ρ ≈ F Bᵀ` from the singular value
/// decomposition. Returns `(F, B)` with `F` of shape `(n·k) × d` and `B` of
/// shape `n × d`.
pub fn factorize(m: &DMatrix<f64>, rho: &DVector<f64>, d: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = m.ncols();
    if d == 0 || d > n {
        return Err(Error::Config(format!("rank {d} outside 1..={n}")));
    }
    let mut k = m.clone();
    for (j, mut c) in k.column_iter_mut().enumerate() {
        c /= rho[j];
    }
    let svd = k.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::numeric("factorize", "singular value decomposition failed")),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let f = DMatrix::from_fn(m.nrows(), d, |r, c| u[(r, order[c])] * svd.singular_values[order[c]]);
    let b = DMatrix::from_fn(n, d, |s, c| vt[(order[c], s)]);
    Ok((f, b))
}

/// `z_r = Σ_s ρ(s) B(s) r(s)`.
pub fn task_embedding(b: &DMatrix<f64>, rho: &DVector<f64>, reward: &DVector<f64>) -> DVector<f64> {
    let weighted = rho.component_mul(reward);
    b.transpose() * weighted
}

#[derive(Clone, Debug, PartialEq)]
pub struct QIdentityReport {
    pub rank: usize,
    pub trials: usize,
    pub tolerance: f64,
    /// Largest `|Q(s,a) − F(s,a)ᵀz_r|` over all trials.
    pub max_error: f64,
    pub failures: usize,
}

impl QIdentityReport {
    pub fn holds(&self) -> bool {
        self.failures == 0
    }
}

/// Checks `Q = F z_r` at the rank-`d` factorization of `M/ρ` for random
/// rewards. A trial fails when its error exceeds `tol`.
pub fn verify_q_identity<R: Rng + ?Sized>(
    mdp: &FiniteMDP,
    pi: &TabularPolicy,
    d: usize,
    trials: usize,
    tol: f64,
    rng: &mut R,
) -> Result<QIdentityReport> {
    let m = exact_successor_measure(mdp, pi)?;
    let (f, b) = factorize(&m, &mdp.rho, d)?;
    let mut report = QIdentityReport {
        rank: d,
        trials,
        tolerance: tol,
        max_error: 0.0,
        failures: 0,
    };
    for _ in 0..trials {
        let r = DVector::from_fn(mdp.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = &m * &r;
        let recon = &f * task_embedding(&b, &mdp.rho, &r);
        let err = (q - recon).amax();
        report.max_error = report.max_error.max(err);
        if !(err <= tol) {
            report.failures += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSuiteConfig {
    pub mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub perturbations: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Test hook: perturbs every computed successor measure.
    pub inject_fault: bool,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        OracleSuiteConfig {
            mdps: 50,
            max_states: 8,
            max_actions: 3,
            perturbations: 100,
            sigma: 0.1,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn measure_for_suite(mdp: &FiniteMDP, pi: &TabularPolicy, fault: bool) -> Result<DMatrix<f64>> {
    let mut m = exact_successor_measure(mdp, pi)?;
    if fault {
        m[(0, 0)] += 1e-3;
    }
    Ok(m)
}

/// Perturbation trials on one MDP: the exact factorization against `trials`
/// Gaussian perturbations of every forward table, targets held at the exact
/// tables. Returns the number of perturbations that did not increase the
/// loss, and the smallest increase seen.
pub fn factorization_minimality<R: Rng + ?Sized>(
    mdp: &FiniteMDP,
    policies: &[TabularPolicy],
    trials: usize,
    sigma: f64,
    fault: bool,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if policies.is_empty() {
        return Err(Error::Config("need at least one policy".into()));
    }
    // B = I is shared across embeddings, so F = M/ρ
    let b = DMatrix::<f64>::identity(mdp.n, mdp.n);
    let mut tables = Vec::with_capacity(policies.len());
    for pi in policies {
        let mut f = measure_for_suite(mdp, pi, fault)?;
        for (j, mut c) in f.column_iter_mut().enumerate() {
            c /= mdp.rho[j];
        }
        tables.push(ForwardTable {
            f,
            policy: pi.clone(),
        });
    }
    let targets: Vec<_> = tables.iter().map(|t| t.f.clone()).collect();
    let base = expected_fb_loss_with_targets(mdp, &tables, &b, &targets, &b)?;
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..trials {
        let perturbed: Vec<_> = tables
            .iter()
            .map(|t| ForwardTable {
                f: t.f.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)),
                policy: t.policy.clone(),
            })
            .collect();
        let l = expected_fb_loss_with_targets(mdp, &perturbed, &b, &targets, &b)?;
        let gap = l - base;
        min_gap = min_gap.min(gap);
        if !(gap > 0.0) {
            violations += 1;
        }
    }
    Ok((violations, min_gap))
}

/// Runs every tabular check on seeded random MDPs.
pub fn run_oracle_suite(cfg: &OracleSuiteConfig) -> Result<OracleReport> {
    if cfg.mdps == 0 || cfg.max_states == 0 || cfg.max_actions == 0 {
        return Err(Error::Usage("oracle suite needs at least one MDP, state and action".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mass_err: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut q_err: f64 = 0.0;
    let mut id_err: f64 = 0.0;
    let mut id_failures = 0;
    for _ in 0..cfg.mdps {
        let n = rng.random_range(1..=cfg.max_states);
        let k = rng.random_range(1..=cfg.max_actions);
        let gamma = rng.random_range(0.1..0.95);
        let mdp = FiniteMDP::random(n, k, gamma, &mut rng)?;
        let pi = TabularPolicy::random(n, k, &mut rng);
        let m = measure_for_suite(&mdp, &pi, cfg.inject_fault)?;
        let mass = 1.0 / (1.0 - gamma);
        for r in m.row_iter() {
            mass_err = mass_err.max((r.sum() - mass).abs());
        }
        min_entry = min_entry.min(m.min());
        let reward = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let via_m = q_from_measure(&m, &reward)?;
        q_err = q_err.max((via_m - direct_q(&mdp, &pi, &reward)?).amax());
        let (f, b) = factorize(&m, &mdp.rho, n)?;
        let exact = exact_successor_measure(&mdp, &pi)?;
        for _ in 0..4 {
            let r = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = (&exact * &r - &f * task_embedding(&b, &mdp.rho, &r)).amax();
            id_err = id_err.max(e);
            if !(e <= 1e-8) {
                id_failures += 1;
            }
        }
    }

    let mdp3 = FiniteMDP::random(3, 2, 0.9, &mut rng)?;
    let policies: Vec<_> = (0..2).map(|_| TabularPolicy::random(3, 2, &mut rng)).collect();
    let (violations, min_gap) =
        factorization_minimality(&mdp3, &policies, cfg.perturbations, cfg.sigma, cfg.inject_fault, &mut rng)?;
    let low_rank = verify_q_identity(&mdp3, &policies[0], 1, 20, 1e-8, &mut rng)?;

    let checks = vec![
        OracleCheck {
            name: "row_mass",
            passed: mass_err <= 1e-12,
            detail: format!("max |Σ M(s,a,·) − 1/(1−γ)| = {mass_err:.3e} over {} MDPs", cfg.mdps),
        },
        OracleCheck {
            name: "nonnegative",
            passed: min_entry >= 0.0,
            detail: format!("min M entry = {min_entry:.3e}"),
        },
        OracleCheck {
            name: "q_recovery",
            passed: q_err <= 1e-10,
            detail: format!("max |M r − direct evaluation| = {q_err:.3e}"),
        },
        OracleCheck {
            name: "q_identity_full_rank",
            passed: id_failures == 0,
            detail: format!("max |Q − F z_r| = {id_err:.3e}, {id_failures} failures"),
        },
        OracleCheck {
            name: "factorization_minimum",
            passed: violations == 0,
            detail: format!(
                "{}/{} perturbations increased the loss, smallest increase {min_gap:.3e}",
                cfg.perturbations - violations,
                cfg.perturbations
            ),
        },
        OracleCheck {
            name: "rank_one_control",
            passed: !low_rank.holds(),
            detail: format!("rank-1 factorization error {:.3e} (must exceed 1e-8)", low_rank.max_error),
        },
    ];
    Ok(OracleReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two states, one action, deterministic swap; ρ uniform.
    fn cycle(gamma: f64) -> FiniteMDP {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        FiniteMDP::new(2, 1, p, gamma, DVector::from_element(2, 0.5)).unwrap()
    }

    #[test]
    fn cycle_measure_is_a_geometric_series() {
        let m = exact_successor_measure(&cycle(0.5), &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((m[(0, 1)] - 4.0 / 3.0).abs() < 1e-14);
        assert!((m[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn tiny_discount_leaves_one_step_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = FiniteMDP::random(4, 2, 1e-9, &mut rng).unwrap();
        let m = exact_successor_measure(&mdp, &TabularPolicy::random(4, 2, &mut rng)).unwrap();
        assert!((m - mdp.transitions()).amax() < 1e-8);
    }

    #[test]
    fn self_loop_accumulates_full_mass() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.7]);
        let mdp = FiniteMDP::new(2, 1, p, 0.8, DVector::from_element(2, 0.5)).unwrap();
        let m = exact_successor_measure(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((m[(0, 0)] - 5.0).abs() < 1e-12);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn q_examples() {
        let mdp = cycle(0.5);
        let pi = TabularPolicy::uniform(2, 1);
        let q = exact_q(&mdp, &pi, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-14);
        let q = exact_q(&mdp, &pi, &DVector::from_element(2, 1.0)).unwrap();
        assert!(q.iter().all(|v| (v - 2.0).abs() < 1e-14));
        let q = exact_q(&mdp, &pi, &DVector::zeros(2)).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q_matches_iterated_bellman_backups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = FiniteMDP::random(5, 3, 0.7, &mut rng).unwrap();
        let pi = TabularPolicy::random(5, 3, &mut rng);
        let r = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let mut q = DVector::<f64>::zeros(15);
        for _ in 0..200 {
            // Q(s,a) = Σ_s′ P(s,a,s′)[r(s′) + γ Σ_a′ π(a′|s′) Q(s′,a′)]
            let v = DVector::from_fn(5, |s, _| r[s] + 0.7 * (0..3).map(|a| pi.probs()[(s, a)] * q[s * 3 + a]).sum::<f64>());
            q = mdp.transitions() * v;
        }
        assert!((exact_q(&mdp, &pi, &r).unwrap() - q).amax() < 1e-12);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 1.0, 0.0]);
        assert!(FiniteMDP::new(2, 1, p, 0.5, DVector::from_element(2, 0.5)).is_err());
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        assert!(FiniteMDP::new(2, 1, p.clone(), 1.0, DVector::from_element(2, 0.5)).is_err());
        assert!(FiniteMDP::new(2, 1, p, 0.5, DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(TabularPolicy::new(DMatrix::from_element(2, 2, 0.4)).is_err());
    }

    fn exact_tables(mdp: &FiniteMDP, policies: &[TabularPolicy]) -> Vec<ForwardTable> {
        policies
            .iter()
            .map(|pi| {
                let mut f = exact_successor_measure(mdp, pi).unwrap();
                for (j, mut c) in f.column_iter_mut().enumerate() {
                    c /= mdp.rho()[j];
                }
                ForwardTable { f, policy: pi.clone() }
            })
            .collect()
    }

    #[test]
    fn zero_tables_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = FiniteMDP::random(3, 2, 0.9, &mut rng).unwrap();
        let t = vec![ForwardTable {
            f: DMatrix::zeros(6, 4),
            policy: TabularPolicy::uniform(3, 2),
        }];
        assert_eq!(expected_fb_loss(&mdp, &t, &DMatrix::zeros(3, 4)).unwrap(), 0.0);
    }

    #[test]
    fn loss_depends_only_on_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = FiniteMDP::random(3, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(3, 2, &mut rng);
        let f = DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let one = expected_fb_loss(&mdp, &[ForwardTable { f: f.clone(), policy: pi.clone() }], &b).unwrap();
        let two = expected_fb_loss(&mdp, &[ForwardTable { f: f * 0.5, policy: pi }], &(b * 2.0)).unwrap();
        assert!((one - two).abs() <= 1e-12 * one.abs().max(1.0));
    }

    #[test]
    fn exact_factorization_is_the_fixed_target_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = FiniteMDP::random(3, 2, 0.9, &mut rng).unwrap();
        let policies: Vec<_> = (0..2).map(|_| TabularPolicy::random(3, 2, &mut rng)).collect();
        let (violations, gap) = factorization_minimality(&mdp, &policies, 100, 0.1, false, &mut rng).unwrap();
        assert_eq!(violations, 0);
        assert!(gap > 0.0);
    }

    #[test]
    fn exact_factorization_attains_its_closed_form_value() {
        // at the optimum the residual F Bᵀ − γT equals P/ρ
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = FiniteMDP::random(3, 2, 0.6, &mut rng).unwrap();
        let pi = TabularPolicy::random(3, 2, &mut rng);
        let t = exact_tables(&mdp, std::slice::from_ref(&pi));
        let b = DMatrix::identity(3, 3);
        let loss = expected_fb_loss(&mdp, &t, &b).unwrap();
        let p = mdp.transitions();
        let mut expected = 0.0;
        for r in 0..6 {
            let w = mdp.rho()[r / 2] / 2.0;
            for s in 0..3 {
                let pr = p[(r, s)] / mdp.rho()[s];
                expected += w * (mdp.rho()[s] * pr * pr - 2.0 * p[(r, s)] * t[0].f[(r, s)]);
            }
        }
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
    }

    #[test]
    fn q_identity_full_rank_and_zero_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = FiniteMDP::random(5, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(5, 2, &mut rng);
        let rep = verify_q_identity(&mdp, &pi, 5, 20, 1e-10, &mut rng).unwrap();
        assert!(rep.holds(), "{rep:?}");
        let m = exact_successor_measure(&mdp, &pi).unwrap();
        let (f, b) = factorize(&m, mdp.rho(), 5).unwrap();
        let z = task_embedding(&b, mdp.rho(), &DVector::zeros(5));
        assert!(z.iter().all(|&v| v == 0.0));
        assert!((f * z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_factorization_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = FiniteMDP::random(3, 2, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::random(3, 2, &mut rng);
        let rep = verify_q_identity(&mdp, &pi, 1, 20, 1e-8, &mut rng).unwrap();
        assert!(!rep.holds());
        assert!(rep.max_error > 1e-8);
    }

    #[test]
    fn suite_passes_and_is_deterministic() {
        let cfg = OracleSuiteConfig::default();
        let a = run_oracle_suite(&cfg).unwrap();
        assert!(a.all_passed(), "{a}");
        assert_eq!(a.to_string(), run_oracle_suite(&cfg).unwrap().to_string());
    }

    #[test]
    fn injected_fault_fails_the_suite() {
        let cfg = OracleSuiteConfig {
            inject_fault: true,
            ..OracleSuiteConfig::default()
        };
        let r = run_oracle_suite(&cfg).unwrap();
        assert!(!r.all_passed());
        assert!(r.checks.iter().any(|c| c.name == "row_mass" && !c.passed));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn measure_rows_have_mass_one_over_one_minus_gamma(
            seed in any::<u64>(), n in 1usize..=8, k in 1usize..=3, gamma in 0.05f64..0.95,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = FiniteMDP::random(n, k, gamma, &mut rng).unwrap();
            let pi = TabularPolicy::random(n, k, &mut rng);
            let m = exact_successor_measure(&mdp, &pi).unwrap();
            for r in m.row_iter() {
                prop_assert!((r.sum() - 1.0 / (1.0 - gamma)).abs() <= 1e-12);
            }
            prop_assert!(m.min() >= 0.0);
            let rw = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let diff = (exact_q(&mdp, &pi, &rw).unwrap() - direct_q(&mdp, &pi, &rw).unwrap()).amax();
            prop_assert!(diff <= 1e-10);
        }
    }
}
