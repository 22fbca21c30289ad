use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    /// `W0 x + A B x + b0` (low-rank delta in parallel with the frozen map).
    ParallelLowRank,
    /// `W0 (x + Wu (Wd x + bd) + bu) + b0` (linear adapter in front of the frozen map).
    SequentialRep,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::ParallelLowRank => "parallel_lowrank",
            AdapterKind::SequentialRep => "sequential_rep",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel_lowrank" | "lora" => Ok(AdapterKind::ParallelLowRank),
            "sequential_rep" | "rep" => Ok(AdapterKind::SequentialRep),
            other => Err(Error::config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Which linear maps of a block get an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub mha_in: bool,
    pub ffn_in: bool,
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            mha_in: true,
            ffn_in: true,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.mha_in {
            parts.push("mha_in");
        }
        if self.ffn_in {
            parts.push("ffn_in");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut p = Placement {
            mha_in: false,
            ffn_in: false,
        };
        for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match part {
                "mha_in" => p.mha_in = true,
                "ffn_in" => p.ffn_in = true,
                "none" => {}
                other => return Err(Error::config(format!("unknown adapter placement `{other}`"))),
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    /// Group count of the sequential up-projection (ignored for the parallel kind).
    pub groups: usize,
    pub placement: Placement,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            kind: AdapterKind::ParallelLowRank,
            rank: 8,
            groups: 1,
            placement: Placement::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub interval: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub adapter: AdapterSpec,
    /// Hidden width of each exit head's MLP; `0` means a single linear map.
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut c = ModelConfig {
            depth: 12,
            interval: 3,
            embed_dim: 64,
            heads: 4,
            mlp_hidden: 256,
            image_size: 32,
            patch_size: 8,
            channels: 3,
            num_classes: 3,
            adapter: AdapterSpec::default(),
            head_hidden: Vec::new(),
        };
        c.head_hidden = c.default_head_hidden();
        c
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        if self.interval == 0 {
            0
        } else {
            self.depth / self.interval
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patches plus the class token.
    pub fn token_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    /// Stages up to `S / 2` are the shallow half.
    pub fn shallow_cutoff(&self) -> usize {
        self.stages() / 2
    }

    /// Shallow stages get an MLP head of width `d`, middle stages width
    /// `d / 2`, the last stage a single linear map.
    pub fn default_head_hidden(&self) -> Vec<usize> {
        let s = self.stages();
        let cutoff = self.shallow_cutoff();
        (1..=s)
            .map(|i| {
                if i == s {
                    0
                } else if i <= cutoff {
                    self.embed_dim
                } else {
                    (self.embed_dim / 2).max(1)
                }
            })
            .collect()
    }

    /// Trainable parameter count of head `stage` (1-based), norm included.
    pub fn head_param_count(&self, stage: usize) -> usize {
        let d = self.embed_dim;
        let k = self.num_classes;
        let norm = 2 * d;
        match self.head_hidden[stage - 1] {
            0 => norm + d * k + k,
            h => norm + d * h + h + h * k + k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("depth must be positive".to_string());
        }
        if self.interval == 0 {
            problems.push("interval must be positive".to_string());
        } else if self.depth % self.interval != 0 {
            problems.push(format!(
                "interval {} does not divide depth {}",
                self.interval, self.depth
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            problems.push(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_hidden == 0 {
            problems.push("mlp_hidden must be positive".into());
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            problems.push("channels must be positive".into());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".into());
        }
        let a = &self.adapter;
        if a.rank == 0 || a.rank >= self.embed_dim {
            problems.push(format!(
                "adapter rank {} must satisfy 0 < r < embed_dim {}",
                a.rank, self.embed_dim
            ));
        }
        if a.kind == AdapterKind::SequentialRep {
            if a.groups == 0 || self.embed_dim % a.groups != 0 || a.rank % a.groups.max(1) != 0 {
                problems.push(format!(
                    "adapter groups {} must divide embed_dim {} and rank {}",
                    a.groups, self.embed_dim, a.rank
                ));
            }
        }
        if problems.is_empty() {
            let s = self.stages();
            if self.head_hidden.len() != s {
                problems.push(format!(
                    "head_hidden has {} entries, expected one per stage ({s})",
                    self.head_hidden.len()
                ));
            } else if (2..=s).any(|i| self.head_param_count(i) > self.head_param_count(i - 1)) {
                problems.push(format!(
                    "head capacities {:?} must be non-increasing with depth",
                    self.head_hidden
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_four_stages() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stages(), 4);
        assert_eq!(c.token_len(), 17);
        assert_eq!(c.head_hidden, vec![64, 64, 32, 0]);
    }

    #[test]
    fn interval_must_divide_depth() {
        let c = ModelConfig {
            depth: 8,
            interval: 3,
            ..ModelConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("does not divide depth 8"), "{err}");
    }

    #[test]
    fn increasing_head_capacity_rejected() {
        let c = ModelConfig {
            head_hidden: vec![0, 64, 64, 0],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn group_constraints() {
        let mut c = ModelConfig::default();
        c.adapter.kind = AdapterKind::SequentialRep;
        c.adapter.groups = 3;
        assert!(c.validate().is_err());
        c.adapter.groups = 2;
        c.validate().unwrap();
    }

    #[test]
    fn placement_roundtrip() {
        for s in ["mha_in,ffn_in", "mha_in", "ffn_in", "none"] {
            let p: Placement = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
    }
}
