//! Risk-aware pairing of clients into two-party groups.

mod blossom;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blossom::max_weight_matching;

/// Largest n the exact matcher accepts by default.
pub const DEFAULT_EXACT_CAP: usize = 64;

/// Symmetric pairwise collusion risk in [0, 1]; the diagonal is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskMatrix {
    n: usize,
    rho: Vec<f64>,
}

impl RiskMatrix {
    pub fn new(n: usize, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != n * n {
            return Err(Error::BadRiskMatrix(format!("{} entries for n = {n}", rho.len())));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let r = rho[i * n + j];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::BadRiskMatrix(format!("rho({i},{j}) = {r} outside [0, 1]")));
                }
                if r != rho[j * n + i] {
                    return Err(Error::BadRiskMatrix(format!("rho({i},{j}) != rho({j},{i})")));
                }
            }
        }
        Ok(RiskMatrix { n, rho })
    }

    /// Upper-triangle values from `f(i, j)` for i < j, mirrored.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut rho = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let r = f(i, j);
                rho[i * n + j] = r;
                rho[j * n + i] = r;
            }
        }
        Self::new(n, rho)
    }

    pub fn uniform(n: usize, r: f64) -> Result<Self> {
        Self::from_fn(n, |_, _| r)
    }

    /// Sparse off-diagonal entries, everything else zero.
    pub fn from_pairs(n: usize, pairs: &[((usize, usize), f64)]) -> Result<Self> {
        let mut rho = vec![0.0; n * n];
        for &((i, j), r) in pairs {
            if i >= n || j >= n || i == j {
                return Err(Error::BadRiskMatrix(format!("bad pair ({i},{j}) for n = {n}")));
            }
            rho[i * n + j] = r;
            rho[j * n + i] = r;
        }
        Self::new(n, rho)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.n + j]
    }

    /// Whitespace-separated square matrix, one row per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::BadRiskMatrix(format!("{t:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::BadRiskMatrix(format!("row of length {} in a {n}-row matrix", r.len())));
        }
        Self::new(n, rows.concat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Per-client metadata used to derive risk scores.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientMeta {
    pub id: usize,
    pub jurisdiction: String,
    pub sector: String,
    /// Clients this one declares a business affiliation with.
    #[serde(default)]
    pub affiliations: Vec<usize>,
}

/// Score increments for shared metadata. These constants are not from any
/// published scoring rule; they are configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskWeights {
    pub same_jurisdiction: f64,
    pub same_sector: f64,
    pub affiliation: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        RiskWeights {
            same_jurisdiction: 0.4,
            same_sector: 0.3,
            affiliation: 0.3,
        }
    }
}

/// Lines of `id jurisdiction sector [affiliated ids, comma separated]`.
pub fn parse_metadata(text: &str) -> Result<Vec<ClientMeta>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::BadRiskMatrix(format!("metadata line {}: {what}", lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&f.len()) {
            return Err(bad("expected 3 or 4 fields"));
        }
        let id = f[0].parse().map_err(|_| bad("bad id"))?;
        let affiliations = match f.get(3) {
            None | Some(&"-") => Vec::new(),
            Some(list) => list.split(',').map(|t| t.parse().map_err(|_| bad("bad affiliation id"))).collect::<Result<_>>()?,
        };
        out.push(ClientMeta {
            id,
            jurisdiction: f[1].to_string(),
            sector: f[2].to_string(),
            affiliations,
        });
    }
    Ok(out)
}

/// ρ(i, j) from shared jurisdiction, sector and declared affiliation, capped at 1.
pub fn risk_from_metadata(meta: &[ClientMeta], w: &RiskWeights) -> Result<RiskMatrix> {
    let n = meta.len();
    let mut by_id = vec![None; n];
    for m in meta {
        if m.id >= n || by_id[m.id].is_some() {
            return Err(Error::BadRiskMatrix(format!("client ids must be 0..{n} without repeats, saw {}", m.id)));
        }
        by_id[m.id] = Some(m);
    }
    let by_id: Vec<&ClientMeta> = by_id.into_iter().map(|m| m.unwrap()).collect();
    RiskMatrix::from_fn(n, |i, j| {
        let (a, b) = (by_id[i], by_id[j]);
        let mut r = 0.0;
        if a.jurisdiction == b.jurisdiction {
            r += w.same_jurisdiction;
        }
        if a.sector == b.sector {
            r += w.same_sector;
        }
        if a.affiliations.contains(&j) || b.affiliations.contains(&i) {
            r += w.affiliation;
        }
        f64::min(1.0, r)
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub round: u32,
    /// Pairs with the smaller id first, sorted.
    pub pairs: Vec<(usize, usize)>,
}

impl GroupAssignment {
    pub fn new(round: u32, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        pairs.sort_unstable();
        GroupAssignment { round, pairs }
    }

    /// Every client in 0..n appears in exactly one pair.
    pub fn is_perfect(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &(a, b) in &self.pairs {
            if a == b || a >= n || b >= n || seen[a] || seen[b] {
                return false;
            }
            seen[a] = true;
            seen[b] = true;
        }
        seen.iter().all(|&s| s)
    }

    pub fn cost(&self, risk: &RiskMatrix) -> f64 {
        self.pairs.iter().map(|&(a, b)| risk.get(a, b)).sum()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// `(0,2) (1,3)`.
    pub fn describe(&self) -> String {
        self.pairs.iter().map(|(a, b)| format!("({a},{b})")).collect::<Vec<_>>().join(" ")
    }
}

fn check_even(n: usize) -> Result<()> {
    if n % 2 == 1 {
        return Err(Error::OddClientCount(n));
    }
    Ok(())
}

/// Risk scores are quantized to this resolution for the integer matcher.
const WEIGHT_SCALE: f64 = 1e9;

/// Minimum-risk perfect matching via maximum-weight, maximum-cardinality
/// matching on weights M − ρ (scaled to integers).
pub fn match_exact(risk: &RiskMatrix, cap: usize) -> Result<GroupAssignment> {
    let n = risk.n();
    check_even(n)?;
    if n > cap {
        return Err(Error::TooLarge { n, cap });
    }
    if n == 0 {
        return Ok(GroupAssignment::new(0, []));
    }
    let big = 2 * WEIGHT_SCALE as i64 + 1;
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j, big - (risk.get(i, j) * WEIGHT_SCALE).round() as i64));
        }
    }
    let mate = max_weight_matching(&edges, true);
    let pairs = (0..n).filter_map(|i| {
        let j = mate[i].expect("complete graph on an even vertex set has a perfect matching");
        (i < j).then_some((i, j))
    });
    Ok(GroupAssignment::new(0, pairs))
}

/// Minimum over all (n−1)!! perfect matchings by enumeration; ties go to the
/// first matching in lexicographic order. Test oracle for small n.
pub fn match_brute_force(risk: &RiskMatrix) -> Result<GroupAssignment> {
    fn go(risk: &RiskMatrix, free: &mut Vec<usize>, cur: &mut Vec<(usize, usize)>, cost: f64, best: &mut (f64, Vec<(usize, usize)>)) {
        if free.is_empty() {
            if cost < best.0 {
                *best = (cost, cur.clone());
            }
            return;
        }
        let a = free.remove(0);
        for k in 0..free.len() {
            let b = free.remove(k);
            cur.push((a, b));
            go(risk, free, cur, cost + risk.get(a, b), best);
            cur.pop();
            free.insert(k, b);
        }
        free.insert(0, a);
    }
    let n = risk.n();
    check_even(n)?;
    if n > 16 {
        return Err(Error::TooLarge { n, cap: 16 });
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(risk, &mut (0..n).collect(), &mut Vec::new(), 0.0, &mut best);
    Ok(GroupAssignment::new(0, best.1))
}

/// Lowest-risk edge first, ties by (i, j), skipping edges touching a paired client.
pub fn match_greedy(risk: &RiskMatrix) -> Result<GroupAssignment> {
    let n = risk.n();
    check_even(n)?;
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    edges.sort_by(|&(a, b), &(c, d)| risk.get(a, b).total_cmp(&risk.get(c, d)).then((a, b).cmp(&(c, d))));
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(n / 2);
    for (a, b) in edges {
        if !used[a] && !used[b] {
            used[a] = true;
            used[b] = true;
            pairs.push((a, b));
        }
    }
    Ok(GroupAssignment::new(0, pairs))
}

/// ρ'(i,j) = min(1, base(i,j) + penalty · #past rounds pairing i with j).
pub fn risk_update(history: &[GroupAssignment], base: &RiskMatrix, repeat_penalty: f64) -> Result<RiskMatrix> {
    if !(repeat_penalty >= 0.0) {
        return Err(Error::Config(format!("repeat_penalty must be non-negative, got {repeat_penalty}")));
    }
    let n = base.n();
    let mut counts = vec![0u32; n * n];
    for g in history {
        for &(a, b) in &g.pairs {
            if a < n && b < n {
                counts[a * n + b] += 1;
            }
        }
    }
    RiskMatrix::from_fn(n, |i, j| f64::min(1.0, base.get(i, j) + repeat_penalty * counts[i * n + j] as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherKind {
    Exact,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingPolicy {
    pub matcher: MatcherKind,
    pub repeat_penalty: f64,
    pub exact_cap: usize,
}

impl Default for GroupingPolicy {
    fn default() -> Self {
        GroupingPolicy {
            matcher: MatcherKind::Exact,
            repeat_penalty: 0.5,
            exact_cap: DEFAULT_EXACT_CAP,
        }
    }
}

pub fn run_matcher(risk: &RiskMatrix, policy: &GroupingPolicy) -> Result<GroupAssignment> {
    match policy.matcher {
        MatcherKind::Exact => match_exact(risk, policy.exact_cap),
        MatcherKind::Greedy => match_greedy(risk),
    }
}

/// Grouping for round `history.len()`, computed from the base risk and all
/// earlier assignments.
///
/// This runs while the previous round trains, so the latency model charges it
/// nothing; it is a pure function of its inputs.
pub fn schedule_next_round(history: &[GroupAssignment], base: &RiskMatrix, policy: &GroupingPolicy) -> Result<GroupAssignment> {
    let risk = risk_update(history, base, policy.repeat_penalty)?;
    let mut g = run_matcher(&risk, policy)?;
    g.round = history.len() as u32;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example4() -> RiskMatrix {
        RiskMatrix::from_pairs(4, &[((0, 1), 0.9), ((0, 2), 0.1), ((0, 3), 0.9), ((1, 2), 0.9), ((1, 3), 0.1), ((2, 3), 0.9)]).unwrap()
    }

    #[test]
    fn four_client_example() {
        for g in [match_exact(&example4(), 64).unwrap(), match_greedy(&example4()).unwrap(), match_brute_force(&example4()).unwrap()] {
            assert_eq!(g.pairs, [(0, 2), (1, 3)]);
            assert!((g.cost(&example4()) - 0.2).abs() < 1e-12);
            assert_eq!(g.describe(), "(0,2) (1,3)");
        }
    }

    #[test]
    fn greedy_can_be_suboptimal() {
        let r = RiskMatrix::from_pairs(4, &[((0, 1), 0.1), ((2, 3), 0.9), ((0, 2), 0.2), ((1, 3), 0.2), ((0, 3), 1.0), ((1, 2), 1.0)]).unwrap();
        let g = match_greedy(&r).unwrap();
        assert_eq!(g.pairs, [(0, 1), (2, 3)]);
        assert!((g.cost(&r) - 1.0).abs() < 1e-12);
        assert!((match_exact(&r, 64).unwrap().cost(&r) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_clients_and_uniform_risk() {
        assert_eq!(match_exact(&RiskMatrix::uniform(2, 0.3).unwrap(), 64).unwrap().pairs, [(0, 1)]);
        let r = RiskMatrix::uniform(8, 0.25).unwrap();
        let g = match_exact(&r, 64).unwrap();
        assert!(g.is_perfect(8));
        assert!((g.cost(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(match_exact(&RiskMatrix::uniform(3, 0.1).unwrap(), 64), Err(Error::OddClientCount(3))));
        assert!(matches!(match_greedy(&RiskMatrix::uniform(5, 0.1).unwrap()), Err(Error::OddClientCount(5))));
        assert!(matches!(match_exact(&RiskMatrix::uniform(66, 0.1).unwrap(), 64), Err(Error::TooLarge { n: 66, cap: 64 })));
        assert!(RiskMatrix::new(2, vec![0.0, 0.5, 0.4, 0.0]).is_err());
        assert!(RiskMatrix::new(2, vec![0.0, 1.5, 1.5, 0.0]).is_err());
    }

    #[test]
    fn risk_update_adds_penalty_and_caps() {
        let base = RiskMatrix::uniform(4, 0.3).unwrap();
        assert_eq!(risk_update(&[], &base, 0.5).unwrap(), base);
        let h = [GroupAssignment::new(0, [(0, 1), (2, 3)])];
        let r = risk_update(&h, &base, 0.5).unwrap();
        assert!((r.get(0, 1) - 0.8).abs() < 1e-12);
        assert!((r.get(1, 0) - 0.8).abs() < 1e-12);
        assert!((r.get(0, 2) - 0.3).abs() < 1e-12);
        let r = risk_update(&[h[0].clone(), h[0].clone()], &base, 0.5).unwrap();
        assert_eq!(r.get(2, 3), 1.0);
        assert!(risk_update(&h, &base, -0.1).is_err());
    }

    #[test]
    fn matrix_text_round_trip() {
        let r = example4();
        assert_eq!(RiskMatrix::parse(&r.to_text()).unwrap(), r);
        assert!(RiskMatrix::parse("0 1\n1").is_err());
        assert!(RiskMatrix::parse("0 x\nx 0").is_err());
    }

    #[test]
    fn metadata_scores() {
        let meta = parse_metadata("# id jur sector affil\n0 EU bank 3\n1 EU health\n2 US bank -\n3 US health\n").unwrap();
        let r = risk_from_metadata(&meta, &RiskWeights::default()).unwrap();
        assert!((r.get(0, 1) - 0.4).abs() < 1e-12);
        assert!((r.get(0, 2) - 0.3).abs() < 1e-12);
        assert!((r.get(0, 3) - 0.3).abs() < 1e-12);
        assert!((r.get(1, 3) - 0.3).abs() < 1e-12);
        let same = parse_metadata("0 EU bank 1\n1 EU bank\n").unwrap();
        assert!((risk_from_metadata(&same, &RiskWeights::default()).unwrap().get(0, 1) - 1.0).abs() < 1e-12);
        assert!(parse_metadata("0 EU").is_err());
    }
}
