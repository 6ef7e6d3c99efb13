//! Grouping rules that need a regex engine, resolved into explicit
//! assignments the core crate understands.

use std::collections::BTreeMap;

use negmerge_core::analysis::GroupingRule;
use negmerge_core::Schema;
use regex::Regex;

use crate::error::{Error, Result};

/// Assigns each tensor to the label whose regex matches it (unanchored).
/// A tensor matched by two different labels is an error; unmatched tensors
/// are left for the `other` group.
pub fn by_name_regex(schema: &Schema, patterns: &[(String, String)]) -> Result<GroupingRule> {
    let compiled = patterns
        .iter()
        .map(|(label, re)| {
            Regex::new(re)
                .map(|r| (label.as_str(), r))
                .map_err(|e| Error::Config(format!("group `{label}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels: Vec<String> = Vec::new();
    for (label, _) in patterns {
        if !labels.contains(label) {
            labels.push(label.clone());
        }
    }
    let mut assignment = BTreeMap::new();
    for name in schema.names() {
        let mut hit: Option<&str> = None;
        for (label, re) in &compiled {
            if !re.is_match(name) {
                continue;
            }
            match hit {
                Some(first) if first != *label => {
                    return Err(negmerge_core::Error::OverlappingGroups {
                        tensor: name.to_string(),
                        first: first.to_string(),
                        second: label.to_string(),
                    }
                    .into())
                }
                _ => hit = Some(label),
            }
        }
        if let Some(label) = hit {
            assignment.insert(name.to_string(), label.to_string());
        }
    }
    Ok(GroupingRule::Assigned {
        labels,
        assignment,
        layer_ranges: BTreeMap::new(),
    })
}

/// Parses `label=pattern`.
pub fn parse_pattern(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((label, pattern)) if !label.is_empty() => Ok((label.to_string(), pattern.to_string())),
        _ => Err(Error::Config(format!("group pattern `{spec}` is not of the form label=pattern"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use negmerge_core::tensor::TensorSpec;
    use negmerge_core::DType;

    fn schema(names: &[&str]) -> Schema {
        let mut s = Schema::new();
        for n in names {
            s.insert(*n, TensorSpec { dtype: DType::F32, shape: vec![1] });
        }
        s
    }

    #[test]
    fn assigns_and_falls_back_to_other() {
        let s = schema(&["encoder.layers.0.w", "encoder.layers.1.w", "head.w", "embed"]);
        let rule = by_name_regex(
            &s,
            &[("enc".into(), r"^encoder\.".into()), ("head".into(), r"^head\.".into())],
        )
        .unwrap();
        let groups = rule.resolve(&s).unwrap();
        assert_eq!(groups.labels, ["enc", "head", "other"]);
        assert_eq!(groups.assignment["embed"], "other");
        assert_eq!(groups.assignment["encoder.layers.1.w"], "enc");
    }

    #[test]
    fn overlap_and_bad_regex() {
        let s = schema(&["a.b"]);
        let err = by_name_regex(&s, &[("x".into(), "a".into()), ("y".into(), "b".into())]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(by_name_regex(&s, &[("x".into(), "(".into())]).is_err());
        assert!(parse_pattern("nolabel").is_err());
        assert_eq!(parse_pattern("a=b=c").unwrap(), ("a".into(), "b=c".into()));
    }
}
