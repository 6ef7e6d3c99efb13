//! Sparsity accounting and retain-floor lambda selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_vector::{apply, NegationConfig, TaskVector};
use crate::tensor::{Schema, TensorMap};

pub const OTHER_GROUP: &str = "other";
pub const DEFAULT_RETAIN_FLOOR: f64 = 0.95;

/// How tensors are bucketed for per-group sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingRule {
    /// Every tensor in one group named `all`.
    Single,
    /// Contiguous layer-depth ranges; see [`depth_groups`].
    ByDepth { n_groups: usize },
    /// `(label, glob)` pairs where `*` matches any run and `?` one character.
    /// A tensor matching two patterns is an error.
    Patterns(Vec<(String, String)>),
    /// Explicit name → label table, in label order.
    Assigned {
        labels: Vec<String>,
        assignment: BTreeMap<String, String>,
        #[serde(default)]
        layer_ranges: BTreeMap<String, (usize, usize)>,
    },
}

impl Default for GroupingRule {
    fn default() -> Self {
        GroupingRule::ByDepth { n_groups: 3 }
    }
}

/// A grouping rule applied to a concrete schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGroups {
    pub labels: Vec<String>,
    pub assignment: BTreeMap<String, String>,
    pub layer_ranges: BTreeMap<String, (usize, usize)>,
}

impl GroupingRule {
    pub fn resolve(&self, schema: &Schema) -> Result<ResolvedGroups> {
        let mut resolved = match self {
            GroupingRule::Single => ResolvedGroups {
                labels: alloc::vec!["all".to_string()],
                assignment: schema.names().map(|n| (n.to_string(), "all".to_string())).collect(),
                layer_ranges: BTreeMap::new(),
            },
            GroupingRule::ByDepth { n_groups } => depth_groups(schema, *n_groups)?.resolve(schema)?,
            GroupingRule::Patterns(patterns) => {
                let mut assignment = BTreeMap::new();
                for name in schema.names() {
                    let mut hit: Option<&str> = None;
                    for (label, pattern) in patterns {
                        if !glob_match(pattern, name) {
                            continue;
                        }
                        match hit {
                            Some(first) if first != label => {
                                return Err(Error::OverlappingGroups {
                                    tensor: name.to_string(),
                                    first: first.to_string(),
                                    second: label.clone(),
                                })
                            }
                            _ => hit = Some(label),
                        }
                    }
                    if let Some(label) = hit {
                        assignment.insert(name.to_string(), label.to_string());
                    }
                }
                let mut labels: Vec<String> = Vec::new();
                for (label, _) in patterns {
                    if !labels.contains(label) {
                        labels.push(label.clone());
                    }
                }
                ResolvedGroups {
                    labels,
                    assignment,
                    layer_ranges: BTreeMap::new(),
                }
            }
            GroupingRule::Assigned {
                labels,
                assignment,
                layer_ranges,
            } => ResolvedGroups {
                labels: labels.clone(),
                assignment: assignment
                    .iter()
                    .filter(|(k, _)| schema.get(k).is_some())
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
                layer_ranges: layer_ranges.clone(),
            },
        };
        // unmatched tensors fall into "other"
        let mut has_other = resolved.labels.iter().any(|l| l == OTHER_GROUP);
        for name in schema.names() {
            if !resolved.assignment.contains_key(name) {
                resolved
                    .assignment
                    .insert(name.to_string(), OTHER_GROUP.to_string());
                if !has_other {
                    resolved.labels.push(OTHER_GROUP.to_string());
                    has_other = true;
                }
            }
        }
        Ok(resolved)
    }
}

/// Minimal glob: `*` matches any sequence, `?` a single character.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Integer following `layers.` or `blocks.` and terminated by `.`.
pub fn layer_index(name: &str) -> Option<usize> {
    for key in ["layers.", "blocks."] {
        let mut rest = name;
        while let Some(pos) = rest.find(key) {
            let boundary = pos == 0 || rest.as_bytes()[pos - 1] == b'.';
            let tail = &rest[pos + key.len()..];
            let digits = tail.bytes().take_while(u8::is_ascii_digit).count();
            if boundary && digits > 0 && tail.as_bytes().get(digits) == Some(&b'.') {
                return tail[..digits].parse().ok();
            }
            rest = &rest[pos + key.len()..];
        }
    }
    None
}

fn depth_label(g: usize, n_groups: usize) -> String {
    match (n_groups, g) {
        (3, 0) => "shallow".to_string(),
        (3, 1) => "middle".to_string(),
        (3, 2) => "deep".to_string(),
        _ => format!("group{g}"),
    }
}

/// Splits layers `0..L` into `n_groups` contiguous, near-equal ranges.
///
/// Layer `k` goes to group `⌊k·n_groups / L⌋`, so 12 layers in 3 groups give
/// 0–3, 4–7, 8–11. Tensors without a layer index land in `other`.
pub fn depth_groups(schema: &Schema, n_groups: usize) -> Result<GroupingRule> {
    if n_groups == 0 {
        return Err(Error::InvalidSpec("depth grouping needs at least one group".into()));
    }
    let indices: BTreeMap<&str, usize> = schema
        .names()
        .filter_map(|n| layer_index(n).map(|k| (n, k)))
        .collect();
    let layers = indices.values().max().ok_or(Error::NoLayerIndices)? + 1;
    let group_of = |k: usize| k * n_groups / layers;

    let labels: Vec<String> = (0..n_groups).map(|g| depth_label(g, n_groups)).collect();
    let mut layer_ranges = BTreeMap::new();
    for k in 0..layers {
        let label = &labels[group_of(k)];
        layer_ranges
            .entry(label.clone())
            .and_modify(|r: &mut (usize, usize)| r.1 = k)
            .or_insert((k, k));
    }
    let assignment = indices
        .iter()
        .map(|(n, &k)| (n.to_string(), labels[group_of(k)].clone()))
        .collect();
    Ok(GroupingRule::Assigned {
        labels,
        assignment,
        layer_ranges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub group: String,
    pub elements: usize,
    pub zeros: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSparsity {
    pub label: String,
    pub elements: usize,
    pub zeros: usize,
    pub zero_fraction: f64,
    /// Inclusive layer range for depth groups.
    pub layers: Option<(usize, usize)>,
}

/// Exact-zero counts of a task vector, overall and broken down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total_elements: usize,
    pub zero_elements: usize,
    pub zero_fraction: f64,
    pub per_tensor: Vec<TensorSparsity>,
    pub per_group: Vec<GroupSparsity>,
    /// Elements zero in every pool member; present when a pool was supplied.
    pub frozen_zero_elements: Option<usize>,
    /// Zeros of the vector that were non-zero in some pool member.
    pub masked_zero_elements: Option<usize>,
}

fn fraction(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

pub fn sparsity_report(
    tau: &TaskVector,
    grouping: &GroupingRule,
    pool: Option<&[TaskVector]>,
) -> Result<SparsityReport> {
    let schema = tau.schema();
    let groups = grouping.resolve(&schema)?;

    let mut per_tensor = Vec::with_capacity(schema.len());
    let mut totals: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (name, t) in tau.delta().iter() {
        let zeros = t.count_zeros();
        let group = groups.assignment[name].clone();
        let entry = totals.entry(groups.labels.iter().find(|l| **l == group).unwrap()).or_default();
        entry.0 += t.len();
        entry.1 += zeros;
        per_tensor.push(TensorSparsity {
            name: name.to_string(),
            group,
            elements: t.len(),
            zeros,
        });
    }
    let per_group = groups
        .labels
        .iter()
        .map(|label| {
            let (elements, zeros) = totals.get(label.as_str()).copied().unwrap_or_default();
            GroupSparsity {
                label: label.clone(),
                elements,
                zeros,
                zero_fraction: fraction(zeros, elements),
                layers: groups.layer_ranges.get(label).copied(),
            }
        })
        .collect();

    let total_elements: usize = per_tensor.iter().map(|t| t.elements).sum();
    let zero_elements: usize = per_tensor.iter().map(|t| t.zeros).sum();

    let (frozen_zero_elements, masked_zero_elements) = match pool {
        None => (None, None),
        Some(pool) => {
            let mut frozen = 0;
            for p in pool {
                schema.check_compatible(&p.schema())?;
            }
            for (name, t) in tau.delta().iter() {
                let members: Vec<_> = pool.iter().map(|p| p.delta().get(name).unwrap()).collect();
                frozen += (0..t.len())
                    .filter(|&i| members.iter().all(|m| m.get(i) == 0.0))
                    .count();
            }
            // tau need not be a merge of `pool`, so count its own frozen zeros
            let frozen_in_tau: usize = tau
                .delta()
                .iter()
                .map(|(name, t)| {
                    let members: Vec<_> =
                        pool.iter().map(|p| p.delta().get(name).unwrap()).collect();
                    (0..t.len())
                        .filter(|&i| t.get(i) == 0.0 && members.iter().all(|m| m.get(i) == 0.0))
                        .count()
                })
                .sum();
            (Some(frozen), Some(zero_elements - frozen_in_tau))
        }
    };

    Ok(SparsityReport {
        total_elements,
        zero_elements,
        zero_fraction: fraction(zero_elements, total_elements),
        per_tensor,
        per_group,
        frozen_zero_elements,
        masked_zero_elements,
    })
}

/// Default lambda grid: 20 points, 0.05 to 1.00 in steps of 0.05.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub retain: f64,
    pub forget: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub points: Vec<LambdaPoint>,
    pub retain_floor_ratio: f64,
    pub baseline_retain: f64,
    pub baseline_forget: f64,
    pub selected_lambda: f64,
    pub selected_index: usize,
}

impl LambdaSweep {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    pub fn selected(&self) -> &LambdaPoint {
        &self.points[self.selected_index]
    }

    /// Retain threshold a grid point must reach.
    pub fn retain_threshold(&self) -> f64 {
        self.retain_floor_ratio * self.baseline_retain
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("grid is empty".into()));
    }
    if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidGrid("grid values must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGrid("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Evaluates `base − λ·τ` for every grid λ and selects the largest λ whose
/// retain metric is at least `floor × retain(base)`.
///
/// `eval` returns `(retain, forget)`. The unedited base is evaluated once and
/// reused for a λ = 0 grid point.
pub fn sweep_lambda(
    base: &TensorMap,
    tau: &TaskVector,
    grid: &[f64],
    floor: f64,
    mut eval: impl FnMut(&TensorMap) -> (f64, f64),
) -> Result<LambdaSweep> {
    validate_grid(grid)?;
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(Error::InvalidConfig(format!("retain floor {floor} must be non-negative")));
    }
    base.schema().check_compatible(&tau.schema())?;
    let (baseline_retain, baseline_forget) = eval(base);
    let threshold = floor * baseline_retain;
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let (retain, forget) = if lambda == 0.0 {
            (baseline_retain, baseline_forget)
        } else {
            eval(&apply(base, tau, &NegationConfig::negate(lambda))?)
        };
        points.push(LambdaPoint {
            lambda,
            retain,
            forget,
            // a model with no retain accuracy never counts as retaining anything
            feasible: retain >= threshold && retain > 0.0,
        });
    }
    let selected_index = points
        .iter()
        .rposition(|p| p.feasible)
        .ok_or(Error::NoFeasibleLambda)?;
    Ok(LambdaSweep {
        selected_lambda: points[selected_index].lambda,
        selected_index,
        points,
        retain_floor_ratio: floor,
        baseline_retain,
        baseline_forget,
    })
}
