//! Distances between two boundary spectral records: δ, δ₀, δ₊, δ̄, δ_*.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, polar_orthogonal, weighted_dot, weighted_norm};
use crate::spectral::{clusters_of, cross_gram, SpectralData, CLUSTER_TOL};

/// Largest window solved by exhaustive assignment; larger ones are greedy.
const BRUTE_FORCE_MAX: usize = 8;
const TIE_TOL: f64 = 1e-12;
/// Windows whose Gram columns keep less than this share of their mass are flagged.
const LEAKAGE_TOL: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Identity,
    /// Signed permutation of the second record.
    Permutation,
    /// Orthogonal change of basis inside a degenerate eigenspace of the second record.
    RotateSecond,
    /// Orthogonal change of basis inside a degenerate eigenspace of the first record.
    RotateFirst,
    /// Window too large for exhaustive search; greedy assignment.
    Greedy,
    /// Rotations inside the exact sub-clusters of either record, then a
    /// signed permutation of the second.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAlignment {
    pub start: usize,
    pub end: usize,
    pub kind: WindowKind,
    /// Rows `start..end` of the first record become `t1 · rows`.
    pub t1: Option<Array2<f64>>,
    /// Rows `start..end` of the second record become `t2 · rows` (signs included).
    pub t2: Option<Array2<f64>>,
    /// Smallest share of a mode's mass captured by the window: second-record
    /// modes against the complete first basis for interior Grams, first-record
    /// columns of the retained Gram otherwise.
    pub captured: f64,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramSource {
    /// Interior eigenvectors in the first record's mass weight.
    Interior,
    /// Normalized boundary fluxes (no eigenvectors retained).
    Boundary,
}

/// Alignment of the second record's modes to the first record's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub k: usize,
    /// `perm[ℓ]`: mode of the second record matched to mode ℓ of the first
    /// (identity inside rotated windows).
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    pub windows: Vec<WindowAlignment>,
    pub ambiguous: bool,
    pub leakage: bool,
    pub source: GramSource,
}

impl Pairing {
    pub fn is_identity(&self) -> bool {
        self.windows.iter().all(|w| w.kind == WindowKind::Identity)
    }
}

/// Index windows formed by merging the degenerate clusters of both records.
fn merged_windows(a: &[f64], b: &[f64]) -> Vec<(usize, usize)> {
    let k = a.len().min(b.len());
    let mut cuts = vec![false; k + 1];
    // A cut at i is allowed when neither record has a cluster straddling i.
    let mut inside = vec![false; k + 1];
    for (s, e) in clusters_of(&a[..k], CLUSTER_TOL).into_iter().chain(clusters_of(&b[..k], CLUSTER_TOL)) {
        for i in s + 1..e {
            inside[i] = true;
        }
    }
    for i in 0..=k {
        cuts[i] = !inside[i];
    }
    let mut out = Vec::new();
    let mut s = 0;
    for i in 1..=k {
        if cuts[i] {
            out.push((s, i));
            s = i;
        }
    }
    out
}

fn is_degenerate(l: &[f64]) -> bool {
    l.windows(2).all(|w| (w[1] - w[0]).abs() <= CLUSTER_TOL * w[0].abs())
}

fn has_subclusters(l: &[f64]) -> bool {
    l.windows(2).any(|w| (w[1] - w[0]).abs() <= CLUSTER_TOL * w[0].abs())
}

/// Capacity-constrained greedy assignment of `items` to `groups`: `score[g][i]`
/// is the affinity, group `g` takes `groups[g].len()` items.
fn assign_to_groups(groups: &[(usize, usize)], score: &Array2<f64>) -> Vec<Vec<usize>> {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (g, _) in groups.iter().enumerate() {
        for i in 0..score.ncols() {
            entries.push((score[[g, i]], g, i));
        }
    }
    entries.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    let mut taken = vec![false; score.ncols()];
    for (_, g, i) in entries {
        if !taken[i] && out[g].len() < groups[g].1 - groups[g].0 {
            taken[i] = true;
            out[g].push(i);
        }
    }
    for o in out.iter_mut() {
        o.sort_unstable();
    }
    out
}

/// Window containing degenerate sub-clusters without being degenerate as a
/// whole. Rows of `b` are second-record modes, columns first-record modes.
/// Alternately rotates each sub-cluster of the second record onto the
/// first-record modes it overlaps most, then each sub-cluster of the first
/// onto the second, and finishes with a signed permutation. Returns
/// `(t1, t2, ambiguous)` with `t2` including the permutation.
fn align_mixed(b: &Array2<f64>, l1: &[f64], l2: &[f64]) -> Result<(Array2<f64>, Array2<f64>, bool)> {
    let m = b.nrows();
    let blocks1 = clusters_of(l1, CLUSTER_TOL);
    let blocks2 = clusters_of(l2, CLUSTER_TOL);
    let mut c = b.clone();
    let mut t1 = Array2::<f64>::eye(m);
    let mut t2 = Array2::<f64>::eye(m);
    let objective = |c: &Array2<f64>| -> f64 {
        let (sigma, _, _) = best_assignment(c);
        (0..m).map(|col| c[[sigma[col], col]].abs()).sum()
    };
    let mut last = objective(&c);
    for _ in 0..50 {
        // Second-record blocks (rows) onto first-record modes (columns).
        let mut score = Array2::zeros((blocks2.len(), m));
        for (g, &(bs, be)) in blocks2.iter().enumerate() {
            for col in 0..m {
                score[[g, col]] = (bs..be).map(|r| c[[r, col]].powi(2)).sum();
            }
        }
        for (&(bs, be), cols) in blocks2.iter().zip(assign_to_groups(&blocks2, &score)) {
            if be - bs < 2 {
                continue;
            }
            let sub = Array2::from_shape_fn((be - bs, be - bs), |(i, j)| c[[bs + i, cols[j]]]);
            let x = polar_orthogonal(sub.t())?;
            let rows = x.dot(&c.slice(s![bs..be, ..]));
            c.slice_mut(s![bs..be, ..]).assign(&rows);
            let tr = x.dot(&t2.slice(s![bs..be, ..]));
            t2.slice_mut(s![bs..be, ..]).assign(&tr);
        }
        // First-record blocks (columns) onto second-record modes (rows).
        let mut score = Array2::zeros((blocks1.len(), m));
        for (g, &(bs, be)) in blocks1.iter().enumerate() {
            for r in 0..m {
                score[[g, r]] = (bs..be).map(|col| c[[r, col]].powi(2)).sum();
            }
        }
        for (&(bs, be), rows) in blocks1.iter().zip(assign_to_groups(&blocks1, &score)) {
            if be - bs < 2 {
                continue;
            }
            let sub = Array2::from_shape_fn((be - bs, be - bs), |(i, j)| c[[rows[i], bs + j]]);
            let y = polar_orthogonal(sub.view())?;
            let cols = c.slice(s![.., bs..be]).dot(&y.t());
            c.slice_mut(s![.., bs..be]).assign(&cols);
            let tr = y.dot(&t1.slice(s![bs..be, ..]));
            t1.slice_mut(s![bs..be, ..]).assign(&tr);
        }
        let now = objective(&c);
        if now <= last + 1e-14 {
            break;
        }
        last = now;
    }
    let (sigma, amb, _) = best_assignment(&c);
    let mut p = Array2::zeros((m, m));
    for col in 0..m {
        let v = c[[sigma[col], col]];
        p[[col, sigma[col]]] = if v < 0.0 { -1.0 } else { 1.0 };
    }
    Ok((t1, p.dot(&t2), amb))
}

fn boundary_gram(sd1: &SpectralData, sd2: &SpectralData, k: usize) -> Array2<f64> {
    let w = &sd1.boundary_weight;
    let n1: Vec<f64> = (0..k).map(|i| sd1.psi_norm(i)).collect();
    let n2: Vec<f64> = (0..k).map(|i| sd2.psi_norm(i)).collect();
    let mut g = Array2::zeros((k, k));
    for a in 0..k {
        let pa = sd2.psi(a);
        let pa = pa.as_slice().expect("row");
        for b in 0..k {
            let d = n1[b] * n2[a];
            if d > 0.0 {
                g[[a, b]] = weighted_dot(pa, sd1.psi(b).as_slice().expect("row"), w) / d;
            }
        }
    }
    g
}

/// Snaps `t` to an exact signed permutation when it is one within `1e-10`.
fn as_signed_permutation(t: &Array2<f64>) -> Option<Array2<f64>> {
    let m = t.nrows();
    let mut p = Array2::zeros((m, m));
    let mut used = vec![false; m];
    for i in 0..m {
        let (j, v) = t
            .row(i)
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (j, &x)| if x.abs() > acc.1.abs() { (j, x) } else { acc });
        if (v.abs() - 1.0).abs() > 1e-10 || used[j] {
            return None;
        }
        used[j] = true;
        p[[i, j]] = v.signum();
    }
    if t.iter().zip(p.iter()).all(|(a, b)| (a - b).abs() <= 1e-10) {
        Some(p)
    } else {
        None
    }
}

fn is_identity(t: &Array2<f64>) -> bool {
    t.indexed_iter().all(|((i, j), &x)| x == if i == j { 1.0 } else { 0.0 })
}

/// Every permutation of `0..m` in lexicographic order.
fn for_each_permutation(m: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..m).collect();
    loop {
        f(&p);
        // next lexicographic permutation
        let Some(i) = (0..m.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
            return;
        };
        let j = (i + 1..m).rev().find(|&j| p[j] > p[i]).expect("successor");
        p.swap(i, j);
        p[i + 1..].reverse();
    }
}

/// Assignment `σ` (first-record column `b` ↦ second-record row `σ[b]`)
/// maximizing `Σ_b |B[σ[b], b]|`, and whether the optimum is tied.
fn best_assignment(b: &Array2<f64>) -> (Vec<usize>, bool, bool) {
    let m = b.nrows();
    if m > BRUTE_FORCE_MAX {
        // Greedy on the largest remaining entry.
        let mut sigma = vec![usize::MAX; m];
        let mut row_used = vec![false; m];
        let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(m * m);
        for r in 0..m {
            for c in 0..m {
                entries.push((b[[r, c]].abs(), r, c));
            }
        }
        entries.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        for (_, r, c) in entries {
            if sigma[c] == usize::MAX && !row_used[r] {
                sigma[c] = r;
                row_used[r] = true;
            }
        }
        return (sigma, false, true);
    }
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    let mut arg = Vec::new();
    for_each_permutation(m, |p| {
        let score: f64 = (0..m).map(|c| b[[p[c], c]].abs()).sum();
        if score > best + TIE_TOL {
            second = best;
            best = score;
            arg = p.to_vec();
        } else if score > second {
            second = score;
        }
    });
    (arg, best - second <= TIE_TOL, false)
}

/// Aligns the modes of `sd2` with those of `sd1`, window by window.
pub fn pair_modes(sd1: &SpectralData, sd2: &SpectralData) -> Result<Pairing> {
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("records live on different meshes".into()));
    }
    if sd1.k() != sd2.k() {
        return Err(Error::Mismatch(format!("record sizes differ: {} vs {}", sd1.k(), sd2.k())));
    }
    let k = sd1.k();
    let (g, source) = match (&sd1.eigvecs, &sd2.eigvecs) {
        (Some(_), Some(_)) => (cross_gram(sd1, sd2)?, GramSource::Interior),
        _ => (boundary_gram(sd1, sd2, k), GramSource::Boundary),
    };
    let mut perm: Vec<usize> = (0..k).collect();
    let mut signs = vec![1.0; k];
    let mut windows = Vec::new();
    let (mut any_amb, mut any_leak) = (false, false);
    let captured_share = |s: usize, e: usize| -> f64 {
        let mut captured = f64::INFINITY;
        match (source, &sd2.eigvecs) {
            (GramSource::Interior, Some(v2)) => {
                // Against the full first basis the row mass is ‖v²_r‖²_{M¹}, so
                // modes leaking past the truncation are seen.
                for r in s..e {
                    let total = weighted_norm(v2.row(r).as_slice().expect("row"), &sd1.mass_weight).powi(2);
                    let inside: f64 = (s..e).map(|c| g[[r, c]].powi(2)).sum();
                    captured = captured.min(if total > 0.0 { inside / total } else { 1.0 });
                }
            }
            _ => {
                for c in s..e {
                    let total: f64 = g.column(c).iter().map(|x| x * x).sum();
                    let inside: f64 = (s..e).map(|r| g[[r, c]].powi(2)).sum();
                    captured = captured.min(if total > 0.0 { inside / total } else { 1.0 });
                }
            }
        }
        captured
    };
    let mut spans = merged_windows(&sd1.lambdas, &sd2.lambdas);
    // Nearby clusters of the first record can trade eigenspaces under the
    // perturbation; a window that loses its mass is merged with the neighbour
    // holding most of it.
    loop {
        let Some(i) = (0..spans.len()).find(|&i| captured_share(spans[i].0, spans[i].1) < LEAKAGE_TOL) else {
            break;
        };
        let (s, e) = spans[i];
        let mass = |(ns, ne): (usize, usize)| -> f64 {
            (s..e).map(|r| (ns..ne).map(|c| g[[r, c]].powi(2) + g[[c, r]].powi(2)).sum::<f64>()).sum()
        };
        let left = if i > 0 { mass(spans[i - 1]) } else { 0.0 };
        let right = if i + 1 < spans.len() { mass(spans[i + 1]) } else { 0.0 };
        if left.max(right) < LEAKAGE_TOL * (e - s) as f64 {
            break;
        }
        let j = if left >= right { i - 1 } else { i + 1 };
        let (lo, hi) = (i.min(j), i.max(j));
        spans[lo] = (spans[lo].0, spans[hi].1);
        spans.remove(hi);
    }
    for (s, e) in spans {
        let m = e - s;
        let b = g.slice(s![s..e, s..e]).to_owned();
        let captured = captured_share(s, e);
        if source == GramSource::Interior && captured < LEAKAGE_TOL {
            any_leak = true;
        }
        let deg2 = m > 1 && is_degenerate(&sd2.lambdas[s..e]);
        let deg1 = m > 1 && is_degenerate(&sd1.lambdas[s..e]);
        let mut ambiguous = false;
        let (kind, t1, t2) = if deg2 {
            let r = polar_orthogonal(b.view())?.reversed_axes().as_standard_layout().to_owned();
            match as_signed_permutation(&r) {
                Some(p) if is_identity(&p) => (WindowKind::Identity, None, None),
                Some(p) => (WindowKind::Permutation, None, Some(p)),
                None => (WindowKind::RotateSecond, None, Some(r)),
            }
        } else if deg1 {
            let r = polar_orthogonal(b.view())?;
            match as_signed_permutation(&r) {
                Some(p) if is_identity(&p) => (WindowKind::Identity, None, None),
                // A signed permutation of the first record equals the
                // inverse permutation of the second.
                Some(p) => (WindowKind::Permutation, None, Some(p.reversed_axes().as_standard_layout().to_owned())),
                None => (WindowKind::RotateFirst, Some(r), None),
            }
        } else if has_subclusters(&sd1.lambdas[s..e]) || has_subclusters(&sd2.lambdas[s..e]) {
            let (t1, t2, amb) = align_mixed(&b, &sd1.lambdas[s..e], &sd2.lambdas[s..e])?;
            ambiguous = amb;
            match (as_signed_permutation(&t1), as_signed_permutation(&t2)) {
                (Some(p1), Some(p2)) if is_identity(&p1) && is_identity(&p2) => (WindowKind::Identity, None, None),
                (Some(p1), Some(p2)) if is_identity(&p1) => (WindowKind::Permutation, None, Some(p2)),
                _ => (WindowKind::Mixed, Some(t1), Some(t2)),
            }
        } else {
            let (sigma, amb, greedy) = best_assignment(&b);
            ambiguous = amb;
            let mut t = Array2::zeros((m, m));
            for c in 0..m {
                let v = b[[sigma[c], c]];
                t[[c, sigma[c]]] = if v < 0.0 { -1.0 } else { 1.0 };
            }
            if is_identity(&t) {
                (WindowKind::Identity, None, None)
            } else if greedy {
                (WindowKind::Greedy, None, Some(t))
            } else {
                (WindowKind::Permutation, None, Some(t))
            }
        };
        any_amb |= ambiguous;
        if let Some(t) = &t2 {
            match kind {
                WindowKind::Permutation | WindowKind::Greedy => {
                    for c in 0..m {
                        let row = t.row(c);
                        let (j, v) = row.iter().enumerate().find(|(_, x)| **x != 0.0).expect("row");
                        perm[s + c] = s + j;
                        signs[s + c] = *v;
                    }
                }
                WindowKind::Mixed => {
                    // Rotations stay inside equal eigenvalues, so the source of
                    // each output row's eigenvalue is its dominant input mode.
                    for c in 0..m {
                        let (j, v) = t
                            .row(c)
                            .iter()
                            .enumerate()
                            .fold((0, 0.0f64), |a, (j, &x)| if x.abs() > a.1.abs() { (j, x) } else { a });
                        perm[s + c] = s + j;
                        signs[s + c] = v.signum();
                    }
                }
                _ => {}
            }
        }
        windows.push(WindowAlignment {
            start: s,
            end: e,
            kind,
            t1,
            t2,
            captured,
            ambiguous,
        });
    }
    let mut pairing = Pairing {
        k,
        perm,
        signs,
        windows,
        ambiguous: any_amb,
        leakage: any_leak,
        source,
    };
    // Rotations already give non-negative paired entries; fix the remaining signs.
    let (a1, a2) = align_unsigned(sd1, sd2, &pairing)?;
    let g2 = match source {
        GramSource::Interior => cross_gram(&a1, &a2)?,
        GramSource::Boundary => boundary_gram(&a1, &a2, k),
    };
    for w in pairing.windows.iter_mut() {
        for c in w.start..w.end {
            if g2[[c, c]] < 0.0 {
                let m = w.end - w.start;
                let t = w.t2.get_or_insert_with(|| Array2::eye(m));
                t.row_mut(c - w.start).mapv_inplace(|x| -x);
                if w.kind == WindowKind::Identity {
                    w.kind = WindowKind::Permutation;
                }
                pairing.signs[c] = -pairing.signs[c];
            }
        }
    }
    Ok(pairing)
}

fn transform_rows(a: &mut Array2<f64>, s: usize, e: usize, t: &Array2<f64>) {
    let block = a.slice(s![s..e, ..]).to_owned();
    a.slice_mut(s![s..e, ..]).assign(&t.dot(&block));
}

fn align_unsigned(sd1: &SpectralData, sd2: &SpectralData, p: &Pairing) -> Result<(SpectralData, SpectralData)> {
    align(sd1, sd2, p)
}

/// Applies a pairing: returns both records with matched, sign-fixed modes.
pub fn align(sd1: &SpectralData, sd2: &SpectralData, p: &Pairing) -> Result<(SpectralData, SpectralData)> {
    if sd1.k() != p.k || sd2.k() != p.k {
        return Err(Error::Mismatch("pairing was computed for different records".into()));
    }
    let mut a = sd1.clone();
    let mut b = sd2.clone();
    for w in &p.windows {
        if let Some(t) = &w.t1 {
            transform_rows(&mut a.psis, w.start, w.end, t);
            if let Some(v) = a.eigvecs.as_mut() {
                transform_rows(v, w.start, w.end, t);
            }
        }
        if let Some(t) = &w.t2 {
            transform_rows(&mut b.psis, w.start, w.end, t);
            if let Some(v) = b.eigvecs.as_mut() {
                transform_rows(v, w.start, w.end, t);
            }
            if matches!(w.kind, WindowKind::Permutation | WindowKind::Greedy | WindowKind::Mixed) {
                for c in w.start..w.end {
                    b.lambdas[c] = sd2.lambdas[p.perm[c]];
                }
            }
        }
    }
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Functionals

/// Admissible ranges `1 ≤ p < 2n/(2n−1)`, `1 ≤ q < 4n/(4n−1)`.
pub fn check_exponents(p: f64, q: f64, n: usize) -> Result<()> {
    let nf = n as f64;
    let pmax = 2.0 * nf / (2.0 * nf - 1.0);
    let qmax = 4.0 * nf / (4.0 * nf - 1.0);
    if !(p >= 1.0 && p < pmax) {
        return Err(Error::Exponent(format!("p = {p} must satisfy 1 ≤ p < {pmax}")));
    }
    if !(q >= 1.0 && q < qmax) {
        return Err(Error::Exponent(format!("q = {q} must satisfy 1 ≤ q < {qmax}")));
    }
    Ok(())
}

fn lp_norm(xs: &[f64], p: f64) -> f64 {
    if xs.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    let m = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    // scaled to avoid overflow in x^p
    m * compensated_sum(xs.iter().map(|x| (x.abs() / m).powf(p))).powf(1.0 / p)
}

fn psi_differences(sd1: &SpectralData, sd2: &SpectralData, k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let d: Vec<f64> = sd1.psi(i).iter().zip(sd2.psi(i)).map(|(a, b)| a - b).collect();
            weighted_norm(&d, &sd1.boundary_weight)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaComponents {
    pub lambda_part: f64,
    pub psi_part: f64,
    pub delta: f64,
}

/// `δ = ‖(λ_k¹−λ_k²)‖_{ℓ^p} + ‖(ψ_k¹−ψ_k²)‖_{ℓ^q(L²(Γ))}` over the first
/// `k` modes, after aligning with `pairing` when given.
pub fn compute_delta(
    sd1: &SpectralData,
    sd2: &SpectralData,
    p: f64,
    q: f64,
    pairing: Option<&Pairing>,
) -> Result<DeltaComponents> {
    check_exponents(p, q, sd1.dim)?;
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("records live on different meshes".into()));
    }
    let aligned;
    let (a, b) = match pairing {
        Some(pr) => {
            aligned = align(sd1, sd2, pr)?;
            (&aligned.0, &aligned.1)
        }
        None => (sd1, sd2),
    };
    let k = a.k().min(b.k());
    let dl: Vec<f64> = (0..k).map(|i| a.lambdas[i] - b.lambdas[i]).collect();
    let dp = psi_differences(a, b, k);
    let lambda_part = lp_norm(&dl, p);
    let psi_part = lp_norm(&dp, q);
    Ok(DeltaComponents {
        lambda_part,
        psi_part,
        delta: lambda_part + psi_part,
    })
}

/// `δ₀ = Σ_{k,ℓ} ℓ^{7/(4n)} k^{−1/(4n)} |δ_{kℓ} − G[k][ℓ]|`, with row `k` the
/// second record's mode and column `ℓ` the first record's.
pub fn compute_delta0(gram: &Array2<f64>, n: usize) -> f64 {
    let nf = n as f64;
    let mut terms = Vec::with_capacity(gram.len());
    for ((k, l), &g) in gram.indexed_iter() {
        let target = if k == l { 1.0 } else { 0.0 };
        let d = (target - g).abs();
        if d != 0.0 {
            terms.push(((l + 1) as f64).powf(7.0 / (4.0 * nf)) * ((k + 1) as f64).powf(-1.0 / (4.0 * nf)) * d);
        }
    }
    compensated_sum(terms)
}

/// Smallest integer `> (n+3)/4`.
pub fn k0_for(n: usize) -> usize {
    (n + 3) / 4 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarStar {
    pub k0: usize,
    pub sigma: f64,
    pub delta_bar: f64,
    pub delta_star: f64,
}

/// `δ̄ = Σ k^{−(4k₀+1)/(2n)}|Δλ_k| + k^{−(4k₀−3)/(2n)}‖Δψ_k‖` and
/// `δ_* = Σ k^{−(2+5/(2n))}(|Δλ_k| + ‖Δψ_k‖)` on aligned records.
pub fn compute_delta_bar_star(sd1: &SpectralData, sd2: &SpectralData, n: usize) -> Result<BarStar> {
    if !sd1.same_discretization(sd2) {
        return Err(Error::Mismatch("records live on different meshes".into()));
    }
    let k = sd1.k().min(sd2.k());
    let nf = n as f64;
    let k0 = k0_for(n);
    let el = (4.0 * k0 as f64 + 1.0) / (2.0 * nf);
    let ep = (4.0 * k0 as f64 - 3.0) / (2.0 * nf);
    let es = 2.0 + 5.0 / (2.0 * nf);
    let dp = psi_differences(sd1, sd2, k);
    let mut bar = Vec::with_capacity(2 * k);
    let mut star = Vec::with_capacity(2 * k);
    for i in 0..k {
        let kk = (i + 1) as f64;
        let dl = (sd1.lambdas[i] - sd2.lambdas[i]).abs();
        bar.push(kk.powf(-el) * dl);
        bar.push(kk.powf(-ep) * dp[i]);
        star.push(kk.powf(-es) * (dl + dp[i]));
    }
    Ok(BarStar {
        k0,
        sigma: 1.0 / (1.0 + k0 as f64),
        delta_bar: compensated_sum(bar),
        delta_star: compensated_sum(star),
    })
}

/// Bounds on what the dropped modes `K < k ≤ N` could add, from the larger
/// of the two records' Weyl and trace constants: `|Δλ_k| ≤ 2ϑk^{2/n}`,
/// `‖Δψ_k‖ ≤ 2𝐜k^{7/(4n)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub lambda_part: f64,
    pub psi_part: f64,
    pub delta_bar: f64,
    pub delta_star: f64,
}

pub fn tail_estimate(sd1: &SpectralData, sd2: &SpectralData, p: f64, q: f64, n: usize) -> TailEstimate {
    let e1 = sd1.estimates();
    let e2 = sd2.estimates();
    let theta = e1.theta.max(e2.theta);
    let c = e1.c_trace.max(e2.c_trace);
    let nf = n as f64;
    let k = sd1.k().min(sd2.k());
    let nt = sd1.n_total.min(sd2.n_total);
    let k0 = k0_for(n) as f64;
    let (mut lp, mut lq, mut bar, mut star) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for kk in (k + 1)..=nt {
        let x = kk as f64;
        let dl = 2.0 * theta * x.powf(2.0 / nf);
        let dp = 2.0 * c * x.powf(7.0 / (4.0 * nf));
        lp.push(dl.powf(p));
        lq.push(dp.powf(q));
        bar.push(x.powf(-(4.0 * k0 + 1.0) / (2.0 * nf)) * dl + x.powf(-(4.0 * k0 - 3.0) / (2.0 * nf)) * dp);
        star.push(x.powf(-(2.0 + 5.0 / (2.0 * nf))) * (dl + dp));
    }
    TailEstimate {
        lambda_part: compensated_sum(lp).powf(1.0 / p),
        psi_part: compensated_sum(lq).powf(1.0 / q),
        delta_bar: compensated_sum(bar),
        delta_star: compensated_sum(star),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub p: f64,
    pub q: f64,
    pub k: usize,
    pub n: usize,
    pub delta_lambda: f64,
    pub delta_psi: f64,
    pub delta: f64,
    /// `None` when either record lacks interior eigenvectors.
    pub delta0: Option<f64>,
    pub delta_plus: Option<f64>,
    pub k0: usize,
    pub delta_bar: f64,
    pub delta_star: f64,
    pub pairing: Pairing,
    pub tail_estimate: TailEstimate,
}

impl DeltaReport {
    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "p", "q", "K", "n", "delta_lambda", "delta_psi", "delta", "delta0", "delta_plus", "k0", "delta_bar",
            "delta_star", "pairing_ambiguous", "pairing_leakage",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.12e}")).unwrap_or_else(|| "not computed".into());
        vec![
            format!("{}", self.p),
            format!("{}", self.q),
            self.k.to_string(),
            self.n.to_string(),
            format!("{:.12e}", self.delta_lambda),
            format!("{:.12e}", self.delta_psi),
            format!("{:.12e}", self.delta),
            opt(self.delta0),
            opt(self.delta_plus),
            self.k0.to_string(),
            format!("{:.12e}", self.delta_bar),
            format!("{:.12e}", self.delta_star),
            self.pairing.ambiguous.to_string(),
            self.pairing.leakage.to_string(),
        ]
    }
}

/// Pairs, aligns and evaluates every functional on the first `k` modes.
pub fn delta_report(sd1: &SpectralData, sd2: &SpectralData, p: f64, q: f64, k: Option<usize>) -> Result<DeltaReport> {
    let n = sd1.dim;
    check_exponents(p, q, n)?;
    let k = k.unwrap_or(sd1.k().min(sd2.k())).min(sd1.k()).min(sd2.k());
    let a = sd1.truncated(k);
    let b = sd2.truncated(k);
    let pairing = pair_modes(&a, &b)?;
    let (a, b) = align(&a, &b, &pairing)?;
    let d = compute_delta(&a, &b, p, q, None)?;
    let delta0 = match (&a.eigvecs, &b.eigvecs) {
        (Some(_), Some(_)) => Some(compute_delta0(&cross_gram(&a, &b)?, n)),
        _ => None,
    };
    let bs = compute_delta_bar_star(&a, &b, n)?;
    Ok(DeltaReport {
        p,
        q,
        k,
        n,
        delta_lambda: d.lambda_part,
        delta_psi: d.psi_part,
        delta: d.delta,
        delta0,
        delta_plus: delta0.map(|x| x + d.delta),
        k0: bs.k0,
        delta_bar: bs.delta_bar,
        delta_star: bs.delta_star,
        pairing,
        tail_estimate: tail_estimate(&a, &b, p, q, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble;
    use crate::geometry::{build_box_mesh, make_field, Bounds, Expression, FieldKind};
    use crate::spectral::eigensolve;
    use std::f64::consts::PI;

    fn square(r: usize, k: usize) -> SpectralData {
        let m = build_box_mesh(2, r).unwrap();
        let f = make_field(&m, FieldKind::Metric, &Expression::identity(), None, Bounds::default()).unwrap();
        eigensolve(&assemble(&m, &f).unwrap(), k).unwrap()
    }

    fn conformal(r: usize, k: usize, eps: f64, center: (f64, f64)) -> SpectralData {
        let m = build_box_mesh(2, r).unwrap();
        let e = Expression::parse_scalar(&format!(
            "1 + {eps}*bump(sqrt((x1-{})^2+(x2-{})^2)/0.25)",
            center.0, center.1
        ))
        .unwrap();
        let f = make_field(&m, FieldKind::Conformal, &e, Some(&Expression::identity()), Bounds::default()).unwrap();
        eigensolve(&assemble(&m, &f).unwrap(), k).unwrap()
    }

    fn swap_modes(sd: &SpectralData, a: usize, b: usize) -> SpectralData {
        let mut out = sd.clone();
        out.lambdas.swap(a, b);
        for arr in [&mut out.psis].into_iter().chain(out.eigvecs.as_mut()) {
            let ra = arr.row(a).to_owned();
            let rb = arr.row(b).to_owned();
            arr.row_mut(a).assign(&rb);
            arr.row_mut(b).assign(&ra);
        }
        out
    }

    #[test]
    fn self_pairing_is_identity() {
        let sd = square(10, 12);
        let p = pair_modes(&sd, &sd).unwrap();
        assert!(p.is_identity());
        assert!(p.signs.iter().all(|s| *s == 1.0));
        let r = delta_report(&sd, &sd, 1.0, 1.0, None).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(r.delta0.unwrap() < 1e-12);
        assert_eq!(r.delta_bar, 0.0);
        assert_eq!(r.delta_star, 0.0);
    }

    #[test]
    fn traded_eigenspaces_merge_windows() {
        // Mode 3 trades places with mode 4 while the eigenvalues keep their
        // order, so the windows {3} and {4, 5} each lose their mass.
        let sd = square(10, 8);
        let mut tr = swap_modes(&sd, 3, 4);
        tr.lambdas = sd.lambdas.clone();
        let p = pair_modes(&sd, &tr).unwrap();
        let w = p.windows.iter().find(|w| w.start <= 3 && 3 < w.end).unwrap();
        assert_eq!((w.start, w.end), (3, 6));
        assert!(w.captured > 0.999);
        assert!(!p.leakage);
        let (a, b) = align(&sd, &tr, &p).unwrap();
        for k in 0..8 {
            let d = (&a.psis.row(k) - &b.psis.row(k)).mapv(f64::abs).sum();
            assert!(d < 1e-9 * a.psi_norm(k), "mode {k}: {d}");
        }
    }

    #[test]
    fn swapped_degenerate_pair_is_recovered() {
        let sd = square(10, 6);
        let sw = swap_modes(&sd, 1, 2);
        let p = pair_modes(&sd, &sw).unwrap();
        assert_eq!(p.perm[1], 2);
        assert_eq!(p.perm[2], 1);
        let r = delta_report(&sd, &sw, 1.0, 1.0, None).unwrap();
        assert!(r.delta < 1e-12 && r.delta0.unwrap() < 1e-10);
    }

    #[test]
    fn sign_flip_is_undone() {
        let sd = square(10, 6);
        let mut fl = sd.clone();
        fl.psis.row_mut(0).mapv_inplace(|x| -x);
        fl.eigvecs.as_mut().unwrap().row_mut(0).mapv_inplace(|x| -x);
        let p = pair_modes(&sd, &fl).unwrap();
        assert_eq!(p.signs[0], -1.0);
        let r = delta_report(&sd, &fl, 1.0, 1.0, None).unwrap();
        assert!(r.delta < 1e-12);
        // Without pairing the flipped diagonal costs 2·m^{7/8}·m^{-1/8} for m = 1.
        let d0 = compute_delta0(&cross_gram(&sd, &fl).unwrap(), 2);
        assert!((d0 - 2.0).abs() < 1e-10);
    }

    #[test]
    fn single_lambda_shift() {
        let sd = square(8, 6);
        let mut b = sd.clone();
        b.lambdas[0] += 0.1;
        for p in [1.0, 1.2, 1.3] {
            let d = compute_delta(&sd, &b, p, 1.0, None).unwrap();
            assert!((d.delta - 0.1).abs() < 1e-12);
        }
        let bs = compute_delta_bar_star(&sd, &b, 2).unwrap();
        assert_eq!(bs.k0, 2);
        assert!((bs.sigma - 1.0 / 3.0).abs() < 1e-15);
        assert!((bs.delta_bar - 0.1).abs() < 1e-12);
        assert!((bs.delta_star - 0.1).abs() < 1e-12);
    }

    #[test]
    fn scaled_flux_oracle() {
        let sd = square(64, 1);
        let eps = 1e-3;
        let mut b = sd.clone();
        b.psis.row_mut(0).mapv_inplace(|x| x * (1.0 + eps));
        let d = compute_delta(&sd, &b, 1.0, 1.0, None).unwrap();
        assert!((d.psi_part / (eps * 2.0 * 2f64.sqrt() * PI) - 1.0).abs() < 0.02);
    }

    #[test]
    fn delta0_single_entry() {
        let mut g = Array2::eye(3);
        g[[0, 1]] = 0.01;
        let d = compute_delta0(&g, 2);
        assert!((d - 0.018340).abs() < 1e-6);
        assert_eq!(compute_delta0(&Array2::eye(4), 2), 0.0);
    }

    #[test]
    fn exponent_ranges() {
        assert!(check_exponents(1.0, 1.0, 2).is_ok());
        assert!(check_exponents(4.0 / 3.0, 1.0, 2).is_err());
        assert!(check_exponents(1.0, 8.0 / 7.0, 2).is_err());
        assert!(check_exponents(0.5, 1.0, 2).is_err());
        assert!(check_exponents(1.19, 1.09, 3).is_ok());
        assert_eq!(k0_for(2), 2);
        assert_eq!(k0_for(3), 2);
        assert_eq!(k0_for(5), 3);
    }

    #[test]
    fn symmetric_perturbation_keeps_pairing_near_identity() {
        let a = square(16, 20);
        let b = conformal(16, 20, 1e-3, (0.5, 0.5));
        let p = pair_modes(&a, &b).unwrap();
        assert!(!p.leakage);
        for (l, &k) in p.perm.iter().enumerate() {
            assert_eq!(l, k);
        }
        let r = delta_report(&a, &b, 1.0, 1.0, None).unwrap();
        let rr = delta_report(&b, &a, 1.0, 1.0, None).unwrap();
        assert!((r.delta - rr.delta).abs() <= 1e-6 * r.delta, "{} {}", r.delta, rr.delta);
        assert!(r.delta > 0.0 && r.delta0.unwrap() > 0.0);
    }

    #[test]
    fn split_cluster_matches_degenerate_perturbation_oracle() {
        // Off-center bump splits the (1,2)/(2,1) pair. First-order theory: the
        // perturbed modes diagonalize the perturbation restricted to the
        // unperturbed eigenspace, i.e. they are the rotated basis found here.
        let a = square(16, 6);
        let b = conformal(16, 6, 1e-3, (0.35, 0.45));
        let p = pair_modes(&a, &b).unwrap();
        let w = p.windows.iter().find(|w| w.start == 1).unwrap();
        assert_eq!(w.end, 3);
        assert!(matches!(w.kind, WindowKind::RotateFirst | WindowKind::Permutation | WindowKind::Identity));
        let (a2, b2) = align(&a, &b, &p).unwrap();
        let g = cross_gram(&a2, &b2).unwrap();
        for i in 1..3 {
            assert!(g[[i, i]] > 1.0 - 1e-3, "{}", g[[i, i]]);
        }
        assert!(g[[1, 2]].abs() < 1e-3 && g[[2, 1]].abs() < 1e-3);
    }

    #[test]
    fn truncation_is_monotone() {
        let a = square(12, 30);
        let b = conformal(12, 30, 0.05, (0.5, 0.5));
        let mut prev = 0.0;
        for k in [5, 10, 20, 30] {
            let kk = a.cluster_safe_truncation(k);
            let r = delta_report(&a, &b, 1.0, 1.0, Some(kk)).unwrap();
            assert!(r.delta >= prev);
            prev = r.delta;
        }
    }

    #[test]
    fn missing_eigvecs_omits_delta0() {
        let mut a = square(8, 6);
        a.eigvecs = None;
        let r = delta_report(&a, &a, 1.0, 1.0, None).unwrap();
        assert_eq!(r.delta0, None);
        assert_eq!(r.delta_plus, None);
        assert_eq!(r.csv_row()[7], "not computed");
    }

    #[test]
    fn permutations_are_lexicographic_and_complete() {
        let mut seen = Vec::new();
        for_each_permutation(3, |p| seen.push(p.to_vec()));
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 1, 2]);
        assert_eq!(seen[5], vec![2, 1, 0]);
        let (s, amb, _) = best_assignment(&Array2::from_elem((2, 2), 0.5));
        assert!(amb);
        assert_eq!(s, vec![0, 1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::sync::OnceLock;

        fn base() -> &'static SpectralData {
            static B: OnceLock<SpectralData> = OnceLock::new();
            B.get_or_init(|| square(6, 8))
        }

        fn perturbed(dl: &[f64], dp: &[f64], t: f64) -> SpectralData {
            let mut b = base().clone();
            b.eigvecs = None;
            for (i, l) in b.lambdas.iter_mut().enumerate() {
                *l += t * dl[i];
            }
            let nb = b.psis.ncols();
            for ((i, j), x) in b.psis.indexed_iter_mut() {
                *x += t * dp[(i * nb + j) % dp.len()];
            }
            b
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn delta_is_symmetric_and_homogeneous(
                dl in proptest::collection::vec(-1.0f64..1.0, 8),
                dp in proptest::collection::vec(-1.0f64..1.0, 13),
                p in 1.0f64..1.3,
                q in 1.0f64..1.14,
                t in 0.01f64..10.0,
            ) {
                let a = base();
                let b = perturbed(&dl, &dp, 1e-3);
                let bt = perturbed(&dl, &dp, 1e-3 * t);
                let ab = compute_delta(a, &b, p, q, None).unwrap();
                let ba = compute_delta(&b, a, p, q, None).unwrap();
                prop_assert!((ab.delta - ba.delta).abs() <= 1e-12 * ab.delta.max(1e-300));
                let abt = compute_delta(a, &bt, p, q, None).unwrap();
                prop_assert!((abt.delta - t * ab.delta).abs() <= 1e-9 * abt.delta.max(1e-300));
                let s1 = compute_delta_bar_star(a, &b, 2).unwrap();
                let s2 = compute_delta_bar_star(a, &bt, 2).unwrap();
                prop_assert!((s2.delta_bar - t * s1.delta_bar).abs() <= 1e-9 * s2.delta_bar);
                prop_assert!((s2.delta_star - t * s1.delta_star).abs() <= 1e-9 * s2.delta_star);
            }

            #[test]
            fn truncation_never_increases(
                dl in proptest::collection::vec(-1.0f64..1.0, 8),
                dp in proptest::collection::vec(-1.0f64..1.0, 7),
                k in 1usize..8,
            ) {
                let a = base();
                let b = perturbed(&dl, &dp, 1e-2);
                let full = compute_delta(a, &b, 1.0, 1.0, None).unwrap();
                let cut = compute_delta(&a.truncated(k), &b.truncated(k), 1.0, 1.0, None).unwrap();
                prop_assert!(cut.delta <= full.delta * (1.0 + 1e-14));
                let fb = compute_delta_bar_star(a, &b, 2).unwrap();
                let cb = compute_delta_bar_star(&a.truncated(k), &b.truncated(k), 2).unwrap();
                prop_assert!(cb.delta_bar <= fb.delta_bar && cb.delta_star <= fb.delta_star);
            }
        }
    }
}
