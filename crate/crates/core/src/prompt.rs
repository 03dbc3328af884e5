//! View-condition prompts and a deterministic hashed text embedding that
//! stands in for a pretrained text encoder.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Car,
    Drone,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Car => "car",
            Domain::Drone => "drone",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(Domain::Car),
            "drone" => Ok(Domain::Drone),
            other => Err(Error::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

pub const VIEW_TEMPLATE: &str = "captured from the [domain] view";
const DOMAIN_SLOT: &str = "[domain]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub classes: Vec<String>,
    pub domain: Domain,
    /// Suffix appended after the class list; `[domain]` is replaced verbatim.
    /// An empty template yields the bare class list.
    pub template: String,
}

impl PromptSpec {
    pub fn view(classes: &[impl AsRef<str>], domain: Domain) -> Self {
        Self {
            classes: classes.iter().map(|c| c.as_ref().to_string()).collect(),
            domain,
            template: VIEW_TEMPLATE.to_string(),
        }
    }

    /// Class list only, with no view information.
    pub fn plain(classes: &[impl AsRef<str>], domain: Domain) -> Self {
        Self {
            template: String::new(),
            ..Self::view(classes, domain)
        }
    }
}

/// `"c₁, c₂, …, c_K captured from the {domain} view"`.
pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    if spec.classes.is_empty() {
        return Err(Error::EmptyClassList);
    }
    let mut out = spec.classes.join(", ");
    let suffix = spec.template.replace(DOMAIN_SLOT, spec.domain.as_str());
    if !suffix.is_empty() {
        out.push(' ');
        out.push_str(&suffix);
    }
    Ok(out)
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
}

/// Adds `weight`-scaled signed contributions derived from SHA-256 of `key`:
/// each 4-byte chunk picks a bucket (low 31 bits) and a sign (top bit).
fn scatter(out: &mut DVector<f64>, key: &str, chunks: usize, weight: f64) {
    let digest = Sha256::digest(key.as_bytes());
    let dim = out.len() as u32;
    for chunk in digest.chunks_exact(4).take(chunks) {
        let word = u32::from_le_bytes(chunk.try_into().unwrap());
        let bucket = ((word & 0x7fff_ffff) % dim) as usize;
        let sign = if word >> 31 == 1 { -1.0 } else { 1.0 };
        out[bucket] += sign * weight;
    }
}

/// Hashed bag-of-tokens embedding plus a position-weighted mix, normalized to
/// unit length. Equal texts give equal vectors.
pub fn embed_prompt(text: &str, dim: usize) -> Result<DVector<f64>> {
    if dim < 8 {
        return Err(Error::DomainError(format!(
            "embedding dimension must be >= 8, got {dim}"
        )));
    }
    let mut v = DVector::zeros(dim);
    for (pos, tok) in tokens(text).enumerate() {
        scatter(&mut v, &format!("tok:{tok}"), 4, 1.0);
        scatter(&mut v, &format!("pos:{pos}:{tok}"), 2, 0.5 / (1.0 + pos as f64).sqrt());
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::DomainError("prompt text has no tokens".into()));
    }
    Ok(v / norm)
}

/// Texts used to fit a domain's prompt subspace: every non-empty class subset
/// (in canonical order) when there are at most 8 classes, otherwise each
/// single class plus the full list.
pub fn enumerate_prompts(classes: &[impl AsRef<str>], domain: Domain, view_condition: bool) -> Result<Vec<String>> {
    if classes.is_empty() {
        return Err(Error::EmptyClassList);
    }
    let k = classes.len();
    let make = |subset: Vec<&str>| {
        let spec = if view_condition {
            PromptSpec::view(&subset, domain)
        } else {
            PromptSpec::plain(&subset, domain)
        };
        build_prompt(&spec)
    };
    let names: Vec<&str> = classes.iter().map(AsRef::as_ref).collect();
    if k <= 8 {
        (1u32..(1 << k))
            .map(|mask| make((0..k).filter(|i| mask >> i & 1 == 1).map(|i| names[i]).collect()))
            .collect()
    } else {
        let mut out: Vec<String> = names.iter().map(|n| make(vec![n])).collect::<Result<_>>()?;
        out.push(make(names.clone())?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CLASS_NAMES;

    #[test]
    fn view_prompt_text() {
        let p = build_prompt(&PromptSpec::view(&["road", "building"], Domain::Drone)).unwrap();
        assert_eq!(p, "road, building captured from the drone view");
        let p = build_prompt(&PromptSpec::view(&["car"], Domain::Car)).unwrap();
        assert_eq!(p, "car captured from the car view");
        let p = build_prompt(&PromptSpec::plain(&["road", "tree"], Domain::Car)).unwrap();
        assert_eq!(p, "road, tree");
        let empty: [&str; 0] = [];
        assert!(matches!(
            build_prompt(&PromptSpec::view(&empty, Domain::Car)),
            Err(Error::EmptyClassList)
        ));
    }

    #[test]
    fn embedding_is_deterministic_unit_norm() {
        let t = "road, building captured from the drone view";
        let a = embed_prompt(t, 64).unwrap();
        assert_eq!(a, embed_prompt(t, 64).unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!(embed_prompt(t, 4).is_err());
        assert!(embed_prompt(" , ", 16).is_err());
    }

    #[test]
    fn domains_are_separable_for_all_benchmark_subsets() {
        for view in [true] {
            let car = enumerate_prompts(&CLASS_NAMES, Domain::Car, view).unwrap();
            let drone = enumerate_prompts(&CLASS_NAMES, Domain::Drone, view).unwrap();
            assert_eq!(car.len(), 63);
            for (c, d) in car.iter().zip(&drone) {
                let (ec, ed) = (embed_prompt(c, 64).unwrap(), embed_prompt(d, 64).unwrap());
                assert!(ec.dot(&ed) < 1.0 - 1e-9, "{c} / {d}");
            }
        }
    }

    #[test]
    fn class_order_changes_embedding() {
        let a = embed_prompt("road, car", 32).unwrap();
        let b = embed_prompt("car, road", 32).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn large_class_lists_use_singles_plus_full() {
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let p = enumerate_prompts(&names, Domain::Car, true).unwrap();
        assert_eq!(p.len(), 11);
        assert!(p[10].starts_with("c0, c1"));
    }
}
