//! Exact information theory over small discrete channels.
//!
//! A `DiscreteChannel` is an explicit joint pmf over four variables: a visual
//! symbol `x_v`, an instruction symbol `x_i`, a retrieved-evidence symbol
//! `e_r`, and a label `l`. Limited model capacity is represented by a
//! `Quantizer`, a fixed partition of the conditioning alphabet; the best
//! predictor that only sees the cell of its input has a closed-form loss gap,
//! and every quantity here is computed by two independent routes and
//! cross-checked before it is returned. All results are in nats.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tolerance for "this pmf sums to one" and for dual-route agreement.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Xv,
    Xi,
    Er,
    L,
}

impl VarKind {
    pub fn parse(s: &str) -> Result<VarKind> {
        match s {
            "x_v" => Ok(VarKind::Xv),
            "x_i" => Ok(VarKind::Xi),
            "e_r" => Ok(VarKind::Er),
            "l" => Ok(VarKind::L),
            other => Err(Error::Channel(format!("unknown variable name '{other}'"))),
        }
    }
}

/// Conditioning variables of the no-retrieval predictor.
pub const X_VARS: [VarKind; 2] = [VarKind::Xv, VarKind::Xi];
/// Conditioning variables of the retrieval-augmented predictor.
pub const XE_VARS: [VarKind; 3] = [VarKind::Xv, VarKind::Xi, VarKind::Er];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteChannel {
    pub n_xv: usize,
    pub n_xi: usize,
    pub n_er: usize,
    pub n_l: usize,
    /// Flat joint pmf, index = ((x_v·n_xi + x_i)·n_er + e_r)·n_l + l.
    pub pmf: Vec<f64>,
}

impl DiscreteChannel {
    pub fn new(n_xv: usize, n_xi: usize, n_er: usize, n_l: usize, pmf: Vec<f64>) -> Result<Self> {
        let cells = n_xv * n_xi * n_er * n_l;
        if cells == 0 {
            return Err(Error::Channel("alphabet sizes must all be positive".into()));
        }
        if pmf.len() != cells {
            return Err(Error::Channel(format!(
                "pmf has {} entries, alphabets imply {}",
                pmf.len(),
                cells
            )));
        }
        if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Channel("pmf entries must be finite and non-negative".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(Error::Channel(format!("pmf sums to {total}, expected 1")));
        }
        Ok(DiscreteChannel { n_xv, n_xi, n_er, n_l, pmf })
    }

    /// Plug-in channel from empirical co-occurrence counts.
    pub fn from_counts(n_xv: usize, n_xi: usize, n_er: usize, n_l: usize, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Channel("empty count table".into()));
        }
        let mut pmf: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        // squeeze out rounding drift so the sum-to-one invariant holds exactly
        let s: f64 = pmf.iter().sum();
        for p in &mut pmf {
            *p /= s;
        }
        Self::new(n_xv, n_xi, n_er, n_l, pmf)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: DiscreteChannel = serde_json::from_str(s)?;
        Self::new(raw.n_xv, raw.n_xi, raw.n_er, raw.n_l, raw.pmf)
    }

    pub fn size_of(&self, v: VarKind) -> usize {
        match v {
            VarKind::Xv => self.n_xv,
            VarKind::Xi => self.n_xi,
            VarKind::Er => self.n_er,
            VarKind::L => self.n_l,
        }
    }

    fn coords(&self, idx: usize) -> [usize; 4] {
        let l = idx % self.n_l;
        let rest = idx / self.n_l;
        let er = rest % self.n_er;
        let rest = rest / self.n_er;
        let xi = rest % self.n_xi;
        let xv = rest / self.n_xi;
        [xv, xi, er, l]
    }

    fn coord_of(c: &[usize; 4], v: VarKind) -> usize {
        match v {
            VarKind::Xv => c[0],
            VarKind::Xi => c[1],
            VarKind::Er => c[2],
            VarKind::L => c[3],
        }
    }

    /// Marginal pmf of a variable group, indexed in the given order
    /// (first variable has the largest stride).
    pub fn marginal(&self, vars: &[VarKind]) -> Result<Vec<f64>> {
        for (i, v) in vars.iter().enumerate() {
            if vars[..i].contains(v) {
                return Err(Error::Channel("duplicate variable in group".into()));
            }
        }
        let size: usize = vars.iter().map(|&v| self.size_of(v)).product();
        let mut out = vec![0.0; size.max(1)];
        for (idx, &p) in self.pmf.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let c = self.coords(idx);
            let mut pos = 0;
            for &v in vars {
                pos = pos * self.size_of(v) + Self::coord_of(&c, v);
            }
            out[pos] += p;
        }
        Ok(out)
    }

    /// Index of this joint cell's variable group, matching `marginal` layout.
    fn group_index(&self, c: &[usize; 4], vars: &[VarKind]) -> usize {
        let mut pos = 0;
        for &v in vars {
            pos = pos * self.size_of(v) + Self::coord_of(&c, v);
        }
        pos
    }
}

// ─── basic quantities ───────────────────────────────────────────────────────

/// Shannon entropy of an explicit pmf, in nats. Validates normalization.
pub fn entropy(pmf: &[f64]) -> Result<f64> {
    if pmf.is_empty() {
        return Err(Error::Channel("entropy of empty pmf".into()));
    }
    if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Channel("pmf entries must be finite and non-negative".into()));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > EXACT_TOL {
        return Err(Error::Channel(format!("pmf sums to {total}, expected 1")));
    }
    Ok(entropy_unchecked(pmf))
}

fn entropy_unchecked(pmf: &[f64]) -> f64 {
    pmf.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// H(group) for a variable group of the channel.
pub fn entropy_of(ch: &DiscreteChannel, vars: &[VarKind]) -> Result<f64> {
    Ok(entropy_unchecked(&ch.marginal(vars)?))
}

/// H(target | given) = H(target, given) − H(given).
pub fn conditional_entropy(ch: &DiscreteChannel, target: &[VarKind], given: &[VarKind]) -> Result<f64> {
    let mut both = target.to_vec();
    both.extend_from_slice(given);
    Ok(entropy_of(ch, &both)? - entropy_of(ch, given)?)
}

/// I(A; B) = H(A) + H(B) − H(A, B). Groups must be disjoint.
pub fn mutual_information(ch: &DiscreteChannel, a: &[VarKind], b: &[VarKind]) -> Result<f64> {
    if a.iter().any(|v| b.contains(v)) {
        return Err(Error::Channel("mutual information of overlapping groups".into()));
    }
    let mut ab = a.to_vec();
    ab.extend_from_slice(b);
    Ok(entropy_of(ch, a)? + entropy_of(ch, b)? - entropy_of(ch, &ab)?)
}

/// I(E_R; L | X_V, X_I) via the chain rule:
/// H(E_R, X) + H(L, X) − H(X) − H(E_R, L, X).
pub fn conditional_mi(ch: &DiscreteChannel) -> Result<f64> {
    let x = &X_VARS[..];
    let ex = [VarKind::Er, VarKind::Xv, VarKind::Xi];
    let lx = [VarKind::L, VarKind::Xv, VarKind::Xi];
    let all = [VarKind::Er, VarKind::L, VarKind::Xv, VarKind::Xi];
    Ok(entropy_of(ch, &ex)? + entropy_of(ch, &lx)? - entropy_of(ch, x)? - entropy_of(ch, &all)?)
}

/// KL(p ‖ q) in nats. Requires q > 0 wherever p > 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Channel(format!("KL over mismatched supports: {} vs {}", p.len(), q.len())));
    }
    for (probs, name) in [(p, "p"), (q, "q")] {
        if probs.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Channel(format!("{name} entries must be finite and non-negative")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Channel(format!("{name} sums to {total}, expected 1")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::AbsoluteContinuity(i));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

// ─── capacity model ─────────────────────────────────────────────────────────

/// Partition of a conditioning alphabet into cells. `cell_of[x]` is the cell
/// id of input symbol x; ids are dense in `0..n_cells` and every cell holds at
/// least one symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantizer {
    cell_of: Vec<usize>,
    n_cells: usize,
}

impl Quantizer {
    pub fn new(cell_of: Vec<usize>) -> Result<Self> {
        if cell_of.is_empty() {
            return Err(Error::Quantizer("empty alphabet".into()));
        }
        let n_cells = cell_of.iter().max().unwrap() + 1;
        let mut seen = vec![false; n_cells];
        for &c in &cell_of {
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|&s: &bool| !s) {
            return Err(Error::Quantizer(format!("cell {missing} has no symbols")));
        }
        Ok(Quantizer { cell_of, n_cells })
    }

    /// One cell per symbol: the full-capacity limit.
    pub fn identity(alphabet: usize) -> Self {
        Quantizer { cell_of: (0..alphabet).collect(), n_cells: alphabet }
    }

    /// One cell for everything: the zero-capacity limit.
    pub fn single(alphabet: usize) -> Self {
        Quantizer { cell_of: vec![0; alphabet], n_cells: 1 }
    }

    pub fn alphabet_len(&self) -> usize {
        self.cell_of.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn cell(&self, x: usize) -> usize {
        self.cell_of[x]
    }

    /// True when `self` can be obtained by merging whole cells of `fine`:
    /// every fine cell lands inside exactly one of our cells.
    pub fn is_coarsening_of(&self, fine: &Quantizer) -> bool {
        if self.cell_of.len() != fine.cell_of.len() {
            return false;
        }
        let mut image: Vec<Option<usize>> = vec![None; fine.n_cells];
        for (x, &fc) in fine.cell_of.iter().enumerate() {
            match image[fc] {
                None => image[fc] = Some(self.cell_of[x]),
                Some(c) if c == self.cell_of[x] => {}
                Some(_) => return false,
            }
        }
        true
    }
}

/// Which alphabet a quantizer partitions, inferred from its length.
fn conditioning_vars(ch: &DiscreteChannel, q: &Quantizer) -> Result<&'static [VarKind]> {
    let nx = ch.n_xv * ch.n_xi;
    let nxe = nx * ch.n_er;
    if q.alphabet_len() == nx && nx != nxe {
        Ok(&X_VARS)
    } else if q.alphabet_len() == nxe {
        Ok(&XE_VARS)
    } else if q.alphabet_len() == nx {
        // n_er == 1 makes the two alphabets coincide; treat as retrieval-aware
        Ok(&XE_VARS)
    } else {
        Err(Error::Quantizer(format!(
            "quantizer covers {} symbols; conditioning alphabets are {nx} (no retrieval) or {nxe} (with retrieval)",
            q.alphabet_len()
        )))
    }
}

/// Expected loss gap of the best capacity-limited predictor:
/// ε̄ = E_x[ KL(P(L|x) ‖ P(L|cell(x))) ].
///
/// Computed two ways — direct enumeration over inputs, and the mutual-
/// information difference I(X;L) − I(Q(X);L) — and cross-checked to 1e-12.
pub fn irreducible_error(ch: &DiscreteChannel, q: &Quantizer) -> Result<f64> {
    let vars = conditioning_vars(ch, q)?;

    // joint p(x, l) over the conditioning alphabet
    let nx = q.alphabet_len();
    let nl = ch.n_l;
    let mut joint = vec![0.0; nx * nl];
    for (idx, &p) in ch.pmf.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let c = ch.coords(idx);
        let x = ch.group_index(&c, vars);
        joint[x * nl + c[3]] += p;
    }

    // cell-level joint p(cell, l); the optimal cell predictor is its conditional
    let mut cell_joint = vec![0.0; q.n_cells() * nl];
    for x in 0..nx {
        let cell = q.cell(x);
        for l in 0..nl {
            cell_joint[cell * nl + l] += joint[x * nl + l];
        }
    }

    // route 1: enumeration of per-input KL against the cell predictor
    let mut eps_enum = 0.0;
    for x in 0..nx {
        let px: f64 = joint[x * nl..(x + 1) * nl].iter().sum();
        if px == 0.0 {
            continue;
        }
        let cell = q.cell(x);
        let pcell: f64 = cell_joint[cell * nl..(cell + 1) * nl].iter().sum();
        for l in 0..nl {
            let pl_x = joint[x * nl + l] / px;
            if pl_x > 0.0 {
                let pl_cell = cell_joint[cell * nl + l] / pcell;
                eps_enum += px * pl_x * (pl_x / pl_cell).ln();
            }
        }
    }

    // route 2: I(X;L) − I(Q(X);L)
    let i_x_l = mi_of_joint(&joint, nx, nl);
    let i_q_l = mi_of_joint(&cell_joint, q.n_cells(), nl);
    let eps_mi = i_x_l - i_q_l;

    if (eps_enum - eps_mi).abs() > EXACT_TOL {
        return Err(Error::RouteMismatch(format!(
            "irreducible error: enumeration {eps_enum} vs information difference {eps_mi}"
        )));
    }
    Ok(eps_enum.max(0.0))
}

/// Mutual information of an explicit two-variable joint table.
fn mi_of_joint(joint: &[f64], na: usize, nb: usize) -> f64 {
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    for a in 0..na {
        for b in 0..nb {
            pa[a] += joint[a * nb + b];
            pb[b] += joint[a * nb + b];
        }
    }
    entropy_unchecked(&pa) + entropy_unchecked(&pb) - entropy_unchecked(joint)
}

/// Information the capacity-limited predictor can actually exploit:
/// I_eff = I(X;L) − ε̄. Cross-checked against I(Q(X);L).
pub fn effective_mi(ch: &DiscreteChannel, q: &Quantizer) -> Result<f64> {
    let vars = conditioning_vars(ch, q)?;
    let eps = irreducible_error(ch, q)?;
    let i_x_l = mutual_information(ch, vars, &[VarKind::L])?;
    let i_eff = i_x_l - eps;

    // independent route: MI between the cell variable and the label
    let nl = ch.n_l;
    let mut cell_joint = vec![0.0; q.n_cells() * nl];
    for (idx, &p) in ch.pmf.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let c = ch.coords(idx);
        let x = ch.group_index(&c, vars);
        cell_joint[q.cell(x) * nl + c[3]] += p;
    }
    let i_q_l = mi_of_joint(&cell_joint, q.n_cells(), nl);
    if (i_eff - i_q_l).abs() > EXACT_TOL {
        return Err(Error::RouteMismatch(format!(
            "effective information: {i_eff} vs cell-variable route {i_q_l}"
        )));
    }
    Ok(i_eff)
}

/// Floor of the expected cross-entropy loss under limited capacity:
/// min CE = H(L) − I_eff. Cross-checked against H(L | Q(X)).
pub fn min_ce_loss(ch: &DiscreteChannel, q: &Quantizer) -> Result<f64> {
    let vars = conditioning_vars(ch, q)?;
    let h_l = entropy_of(ch, &[VarKind::L])?;
    let i_eff = effective_mi(ch, q)?;
    let min_ce = h_l - i_eff;

    // independent route: conditional entropy of L given the cell variable
    let nl = ch.n_l;
    let mut cell_joint = vec![0.0; q.n_cells() * nl];
    for (idx, &p) in ch.pmf.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let c = ch.coords(idx);
        let x = ch.group_index(&c, vars);
        cell_joint[q.cell(x) * nl + c[3]] += p;
    }
    let mut p_cell = vec![0.0; q.n_cells()];
    for cell in 0..q.n_cells() {
        p_cell[cell] = cell_joint[cell * nl..(cell + 1) * nl].iter().sum();
    }
    let h_l_given_q = entropy_unchecked(&cell_joint) - entropy_unchecked(&p_cell);
    if (min_ce - h_l_given_q).abs() > EXACT_TOL {
        return Err(Error::RouteMismatch(format!(
            "loss floor: {min_ce} vs conditional-entropy route {h_l_given_q}"
        )));
    }
    Ok(min_ce)
}

// ─── retrieval decomposition ────────────────────────────────────────────────

/// How adding retrieved evidence moves the exploitable information.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeltaDecomposition {
    /// I_eff(with retrieval) − I_eff(without).
    pub delta_ieff: f64,
    /// New information in the evidence itself: I(E_R; L | X_V, X_I).
    pub delta_itrue: f64,
    /// Learnability change: ε̄(without) − ε̄(with).
    pub delta_eps: f64,
}

/// Decompose the retrieval gain. `q_without` partitions the (x_v, x_i)
/// alphabet, `q_with` the (x_v, x_i, e_r) alphabet; the identity
/// ΔI_eff = ΔI_true + Δε̄ is asserted before returning.
pub fn delta_ieff(ch: &DiscreteChannel, q_without: &Quantizer, q_with: &Quantizer) -> Result<DeltaDecomposition> {
    let nx = ch.n_xv * ch.n_xi;
    let nxe = nx * ch.n_er;
    if q_without.alphabet_len() != nx {
        return Err(Error::Quantizer(format!(
            "no-retrieval quantizer covers {} symbols, alphabet has {nx}",
            q_without.alphabet_len()
        )));
    }
    if q_with.alphabet_len() != nxe {
        return Err(Error::Quantizer(format!(
            "retrieval quantizer covers {} symbols, alphabet has {nxe}",
            q_with.alphabet_len()
        )));
    }
    let eps_without = irreducible_error_over(ch, q_without, &X_VARS)?;
    let eps_with = irreducible_error_over(ch, q_with, &XE_VARS)?;
    let i_x_l = mutual_information(ch, &X_VARS, &[VarKind::L])?;
    let i_xe_l = mutual_information(ch, &XE_VARS, &[VarKind::L])?;

    let delta = DeltaDecomposition {
        delta_ieff: (i_xe_l - eps_with) - (i_x_l - eps_without),
        delta_itrue: conditional_mi(ch)?,
        delta_eps: eps_without - eps_with,
    };
    let recomposed = delta.delta_itrue + delta.delta_eps;
    if (delta.delta_ieff - recomposed).abs() > EXACT_TOL {
        return Err(Error::RouteMismatch(format!(
            "retrieval decomposition: direct {} vs recomposed {recomposed}",
            delta.delta_ieff
        )));
    }
    Ok(delta)
}

/// `irreducible_error` with the conditioning variables pinned explicitly,
/// bypassing length-based inference (needed when n_er = 1 makes the two
/// alphabets the same size).
fn irreducible_error_over(ch: &DiscreteChannel, q: &Quantizer, vars: &[VarKind]) -> Result<f64> {
    let expect: usize = vars.iter().map(|&v| ch.size_of(v)).product();
    if q.alphabet_len() != expect {
        return Err(Error::Quantizer(format!(
            "quantizer covers {} symbols, conditioning alphabet has {expect}",
            q.alphabet_len()
        )));
    }
    let nl = ch.n_l;
    let mut joint = vec![0.0; expect * nl];
    for (idx, &p) in ch.pmf.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let c = ch.coords(idx);
        let x = ch.group_index(&c, vars);
        joint[x * nl + c[3]] += p;
    }
    let mut cell_joint = vec![0.0; q.n_cells() * nl];
    for x in 0..expect {
        for l in 0..nl {
            cell_joint[q.cell(x) * nl + l] += joint[x * nl + l];
        }
    }
    let mut eps = 0.0;
    for x in 0..expect {
        let px: f64 = joint[x * nl..(x + 1) * nl].iter().sum();
        if px == 0.0 {
            continue;
        }
        let cell = q.cell(x);
        let pcell: f64 = cell_joint[cell * nl..(cell + 1) * nl].iter().sum();
        for l in 0..nl {
            let pl_x = joint[x * nl + l] / px;
            if pl_x > 0.0 {
                eps += px * pl_x * (pl_x * pcell / cell_joint[cell * nl + l]).ln();
            }
        }
    }
    let check = mi_of_joint(&joint, expect, nl) - mi_of_joint(&cell_joint, q.n_cells(), nl);
    if (eps - check).abs() > EXACT_TOL {
        return Err(Error::RouteMismatch(format!(
            "irreducible error: enumeration {eps} vs information difference {check}"
        )));
    }
    Ok(eps.max(0.0))
}

// ─── capacity-ordering check ────────────────────────────────────────────────

/// The three loss-side orderings implied by shrinking capacity.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub eps_small: f64,
    pub eps_fine: f64,
    pub ieff_small: f64,
    pub ieff_fine: f64,
    pub min_ce_small: f64,
    pub min_ce_fine: f64,
}

impl HypothesisReport {
    pub fn holds(&self) -> bool {
        self.eps_small >= self.eps_fine - EXACT_TOL
            && self.ieff_small <= self.ieff_fine + EXACT_TOL
            && self.min_ce_small >= self.min_ce_fine - EXACT_TOL
    }
}

/// Verify that a lower-capacity (coarser) quantizer has larger irreducible
/// error, smaller exploitable information, and a higher loss floor.
/// `q_small` must be a coarsening of `q_fine`; non-nested pairs carry no
/// ordering guarantee and are refused.
pub fn hypothesis_check(ch: &DiscreteChannel, q_small: &Quantizer, q_fine: &Quantizer) -> Result<HypothesisReport> {
    if !q_small.is_coarsening_of(q_fine) {
        return Err(Error::NonNested);
    }
    let report = HypothesisReport {
        eps_small: irreducible_error(ch, q_small)?,
        eps_fine: irreducible_error(ch, q_fine)?,
        ieff_small: effective_mi(ch, q_small)?,
        ieff_fine: effective_mi(ch, q_fine)?,
        min_ce_small: min_ce_loss(ch, q_small)?,
        min_ce_fine: min_ce_loss(ch, q_fine)?,
    };
    if !report.holds() {
        return Err(Error::RouteMismatch(format!(
            "capacity ordering violated for nested quantizers: {report:?}"
        )));
    }
    Ok(report)
}

// ─── full ledger ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct QuantizerLedger {
    pub cells: usize,
    pub irreducible_error: f64,
    pub effective_mi: f64,
    pub min_ce_loss: f64,
}

/// Everything the theory produces for one channel and one quantizer pair,
/// ready for JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct EmiLedger {
    pub h_l: f64,
    pub h_l_given_x: f64,
    pub i_x_l: f64,
    pub i_xe_l: f64,
    pub without_retrieval: QuantizerLedger,
    pub with_retrieval: QuantizerLedger,
    pub delta_ieff: f64,
    pub delta_itrue: f64,
    pub delta_eps: f64,
}

pub fn build_ledger(ch: &DiscreteChannel, q_without: &Quantizer, q_with: &Quantizer) -> Result<EmiLedger> {
    let delta = delta_ieff(ch, q_without, q_with)?;
    Ok(EmiLedger {
        h_l: entropy_of(ch, &[VarKind::L])?,
        h_l_given_x: conditional_entropy(ch, &[VarKind::L], &X_VARS)?,
        i_x_l: mutual_information(ch, &X_VARS, &[VarKind::L])?,
        i_xe_l: mutual_information(ch, &XE_VARS, &[VarKind::L])?,
        without_retrieval: QuantizerLedger {
            cells: q_without.n_cells(),
            irreducible_error: irreducible_error_over(ch, q_without, &X_VARS)?,
            effective_mi: mutual_information(ch, &X_VARS, &[VarKind::L])?
                - irreducible_error_over(ch, q_without, &X_VARS)?,
            min_ce_loss: {
                let ieff = mutual_information(ch, &X_VARS, &[VarKind::L])?
                    - irreducible_error_over(ch, q_without, &X_VARS)?;
                entropy_of(ch, &[VarKind::L])? - ieff
            },
        },
        with_retrieval: QuantizerLedger {
            cells: q_with.n_cells(),
            irreducible_error: irreducible_error_over(ch, q_with, &XE_VARS)?,
            effective_mi: mutual_information(ch, &XE_VARS, &[VarKind::L])?
                - irreducible_error_over(ch, q_with, &XE_VARS)?,
            min_ce_loss: {
                let ieff = mutual_information(ch, &XE_VARS, &[VarKind::L])?
                    - irreducible_error_over(ch, q_with, &XE_VARS)?;
                entropy_of(ch, &[VarKind::L])? - ieff
            },
        },
        delta_ieff: delta.delta_ieff,
        delta_itrue: delta.delta_itrue,
        delta_eps: delta.delta_eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[0.5, -0.5, 1.0]).is_err());
    }

    #[test]
    fn quantizer_rejects_gap_in_cell_ids() {
        assert!(Quantizer::new(vec![0, 2]).is_err());
        assert!(Quantizer::new(vec![0, 1, 1, 0]).is_ok());
    }

    #[test]
    fn coarsening_detection() {
        let fine = Quantizer::new(vec![0, 1, 2, 3]).unwrap();
        let coarse = Quantizer::new(vec![0, 0, 1, 1]).unwrap();
        let skew = Quantizer::new(vec![0, 1, 0, 1]).unwrap();
        assert!(coarse.is_coarsening_of(&fine));
        assert!(skew.is_coarsening_of(&fine));
        assert!(!fine.is_coarsening_of(&coarse));
        assert!(!coarse.is_coarsening_of(&skew));
    }

    #[test]
    fn unknown_variable_name() {
        assert!(VarKind::parse("x_q").is_err());
        assert_eq!(VarKind::parse("e_r").unwrap(), VarKind::Er);
    }
}
