//! Architecture specs, named presets, and MoE placement strategies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::BlockStyle;
use crate::routing::{CapacityConfig, GateKind};

/// Which block family an isotropic stack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsoBlockKind {
    Transformer,
    ConvNext,
}

/// Constant-resolution token stack (ViT-style, or isotropic ConvNeXt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotropicSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub block: IsoBlockKind,
}

impl IsotropicSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.block == IsoBlockKind::Transformer && self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch tokens per image (the class token comes on top).
    pub fn patch_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }
}

/// Four-stage hierarchical backbone (ConvNeXt-style): patchify stem x4,
/// then x2 downsampling between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchicalSpec {
    pub image_size: usize,
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    pub num_classes: usize,
    pub mlp_ratio: f64,
}

impl HierarchicalSpec {
    pub fn validate(&self) -> Result<()> {
        // stem /4 then three /2 downsamples
        if self.image_size % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by 32",
                self.image_size
            )));
        }
        if self.depths.iter().any(|&d| d == 0) || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "stage depths and dims must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Global block index range of a stage.
    pub fn stage_range(&self, stage: usize) -> std::ops::Range<usize> {
        let start: usize = self.depths[..stage].iter().sum();
        start..start + self.depths[stage]
    }

    /// Feature-map side length within a stage.
    pub fn stage_grid(&self, stage: usize) -> usize {
        self.image_size / 4 / (1 << stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ArchSpec {
    Isotropic(IsotropicSpec),
    Hierarchical(HierarchicalSpec),
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Isotropic(s) => s.validate(),
            ArchSpec::Hierarchical(s) => s.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchSpec::Isotropic(s) => s.num_classes,
            ArchSpec::Hierarchical(s) => s.num_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ArchSpec::Isotropic(s) => s.image_size,
            ArchSpec::Hierarchical(s) => s.image_size,
        }
    }

    pub fn total_blocks(&self) -> usize {
        match self {
            ArchSpec::Isotropic(s) => s.depth,
            ArchSpec::Hierarchical(s) => s.total_blocks(),
        }
    }

    pub fn block_style(&self) -> BlockStyle {
        match self {
            ArchSpec::Isotropic(s) => match s.block {
                IsoBlockKind::Transformer => BlockStyle::ViT,
                IsoBlockKind::ConvNext => BlockStyle::ConvNeXt,
            },
            ArchSpec::Hierarchical(_) => BlockStyle::ConvNeXt,
        }
    }
}

/// Where MoE blocks go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementStrategy {
    #[serde(rename = "none")]
    NoMoE,
    Every2,
    Stage,
    Last2,
    Last3,
}

impl std::fmt::Display for PlacementStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PlacementStrategy::NoMoE => "none",
            PlacementStrategy::Every2 => "every2",
            PlacementStrategy::Stage => "stage",
            PlacementStrategy::Last2 => "last2",
            PlacementStrategy::Last3 => "last3",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for PlacementStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nomoe" | "no-moe" => Ok(PlacementStrategy::NoMoE),
            "every2" | "every-2" => Ok(PlacementStrategy::Every2),
            "stage" => Ok(PlacementStrategy::Stage),
            "last2" | "last-2" => Ok(PlacementStrategy::Last2),
            "last3" | "last-3" => Ok(PlacementStrategy::Last3),
            other => Err(Error::InvalidArgument(format!(
                "unknown placement strategy '{other}'"
            ))),
        }
    }
}

/// Resolve a placement to the set of global block indices that become MoE.
///
/// Isotropic: "every second" anchors on odd zero-based indices, so the
/// Last-2 set ({L-3, L-1} for even depth) is a subset of Every-2.
/// Hierarchical: Stage takes the final block of each stage; Last-2 the
/// final block of the last two stages; Last-3 additionally the middle
/// block of stage 3 (index depth3/2); Every-2 takes odd in-stage indices.
pub fn placement_layers(
    strategy: PlacementStrategy,
    arch: &ArchSpec,
) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    match (arch, strategy) {
        (_, PlacementStrategy::NoMoE) => {}
        (ArchSpec::Isotropic(s), PlacementStrategy::Every2) => {
            set.extend((0..s.depth).filter(|i| i % 2 == 1));
        }
        (ArchSpec::Isotropic(s), PlacementStrategy::Last2) => {
            let every2: Vec<usize> = (0..s.depth).filter(|i| i % 2 == 1).collect();
            if every2.len() < 2 {
                return Err(Error::Unsupported(format!(
                    "last2 needs depth >= 4, got {}",
                    s.depth
                )));
            }
            set.extend(every2[every2.len() - 2..].iter().copied());
        }
        (ArchSpec::Isotropic(_), PlacementStrategy::Stage) => {
            return Err(Error::Unsupported(
                "stage placement is defined for hierarchical backbones only".into(),
            ));
        }
        (ArchSpec::Isotropic(_), PlacementStrategy::Last3) => {
            return Err(Error::Unsupported(
                "last3 placement is defined for hierarchical backbones only".into(),
            ));
        }
        (ArchSpec::Hierarchical(s), PlacementStrategy::Every2) => {
            for stage in 0..4 {
                let range = s.stage_range(stage);
                set.extend(range.clone().filter(|i| (i - range.start) % 2 == 1));
            }
        }
        (ArchSpec::Hierarchical(s), PlacementStrategy::Stage) => {
            for stage in 0..4 {
                set.insert(s.stage_range(stage).end - 1);
            }
        }
        (ArchSpec::Hierarchical(s), PlacementStrategy::Last2) => {
            set.insert(s.stage_range(2).end - 1);
            set.insert(s.stage_range(3).end - 1);
        }
        (ArchSpec::Hierarchical(s), PlacementStrategy::Last3) => {
            set.insert(s.stage_range(2).end - 1);
            set.insert(s.stage_range(3).end - 1);
            set.insert(s.stage_range(2).start + s.depths[2] / 2);
        }
    }
    Ok(set)
}

/// MoE settings independent of the embedding width (the expert dim comes
/// from the block being replaced).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSettings {
    pub num_experts: usize,
    pub top_k: usize,
    pub gate: GateKind,
    pub mlp_ratio: f64,
    #[serde(default)]
    pub capacity: CapacityConfig,
}

impl MoeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::InvalidArgument(format!(
                "top_k {} out of range for {} experts",
                self.top_k, self.num_experts
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "expert mlp_ratio {} must be positive",
                self.mlp_ratio
            )));
        }
        if let CapacityConfig::Factor(f) = self.capacity {
            if f <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "capacity factor {f} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Complete model description: backbone + placement + MoE settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    pub placement: PlacementStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSettings>,
}

impl ModelSpec {
    pub fn dense(arch: ArchSpec) -> Self {
        ModelSpec {
            arch,
            placement: PlacementStrategy::NoMoE,
            moe: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        if self.placement != PlacementStrategy::NoMoE && self.moe.is_none() {
            return Err(Error::InvalidArgument(format!(
                "placement {} requires moe settings",
                self.placement
            )));
        }
        // resolving the placement validates the combination
        placement_layers(self.placement, &self.arch)?;
        Ok(())
    }

    pub fn moe_blocks(&self) -> Result<BTreeSet<usize>> {
        if self.moe.is_none() {
            return Ok(BTreeSet::new());
        }
        placement_layers(self.placement, &self.arch)
    }
}

/// Named architecture presets. Paper-scale presets default to 1000
/// classes; micro presets to 16.
pub fn preset(name: &str) -> Result<ArchSpec> {
    let arch = match name.to_ascii_lowercase().as_str() {
        "vit-s" => ArchSpec::Isotropic(IsotropicSpec {
            image_size: 224,
            patch_size: 16,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes: 1000,
            block: IsoBlockKind::Transformer,
        }),
        "vit-b" => ArchSpec::Isotropic(IsotropicSpec {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
            block: IsoBlockKind::Transformer,
        }),
        "convnext-t" => ArchSpec::Hierarchical(HierarchicalSpec {
            image_size: 224,
            depths: [3, 3, 9, 3],
            dims: [96, 192, 384, 768],
            num_classes: 1000,
            mlp_ratio: 4.0,
        }),
        "convnext-s" => ArchSpec::Hierarchical(HierarchicalSpec {
            image_size: 224,
            depths: [3, 3, 27, 3],
            dims: [96, 192, 384, 768],
            num_classes: 1000,
            mlp_ratio: 4.0,
        }),
        "convnext-b" => ArchSpec::Hierarchical(HierarchicalSpec {
            image_size: 224,
            depths: [3, 3, 27, 3],
            dims: [128, 256, 512, 1024],
            num_classes: 1000,
            mlp_ratio: 4.0,
        }),
        // isotropic ConvNeXt stubs, used for accounting only
        "convnext-s-iso" => ArchSpec::Isotropic(IsotropicSpec {
            image_size: 224,
            patch_size: 16,
            dim: 384,
            depth: 18,
            heads: 1,
            mlp_ratio: 4.0,
            num_classes: 1000,
            block: IsoBlockKind::ConvNext,
        }),
        "convnext-b-iso" => ArchSpec::Isotropic(IsotropicSpec {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 18,
            heads: 1,
            mlp_ratio: 4.0,
            num_classes: 1000,
            block: IsoBlockKind::ConvNext,
        }),
        // desk-scale presets (not from any published table)
        "micro-vit" => ArchSpec::Isotropic(IsotropicSpec {
            image_size: 32,
            patch_size: 4,
            dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 16,
            block: IsoBlockKind::Transformer,
        }),
        "micro-convnext" => ArchSpec::Hierarchical(HierarchicalSpec {
            image_size: 32,
            depths: [1, 1, 3, 1],
            dims: [32, 64, 128, 256],
            num_classes: 16,
            mlp_ratio: 4.0,
        }),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset '{other}'"
            )))
        }
    };
    Ok(arch)
}

pub const PRESET_NAMES: &[&str] = &[
    "vit-s",
    "vit-b",
    "convnext-t",
    "convnext-s",
    "convnext-b",
    "convnext-s-iso",
    "convnext-b-iso",
    "micro-vit",
    "micro-convnext",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit12_every2_is_odd_indices() {
        let arch = preset("vit-s").unwrap();
        let set = placement_layers(PlacementStrategy::Every2, &arch).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![1, 3, 5, 7, 9, 11]);
    }

    #[test]
    fn vit12_last2_is_9_and_11() {
        let arch = preset("vit-s").unwrap();
        let set = placement_layers(PlacementStrategy::Last2, &arch).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![9, 11]);
    }

    #[test]
    fn every2_size_is_half_depth() {
        for depth in [4usize, 6, 8, 12, 18] {
            let arch = ArchSpec::Isotropic(IsotropicSpec {
                image_size: 224,
                patch_size: 16,
                dim: 64,
                depth,
                heads: 4,
                mlp_ratio: 4.0,
                num_classes: 10,
                block: IsoBlockKind::Transformer,
            });
            let set = placement_layers(PlacementStrategy::Every2, &arch).unwrap();
            assert_eq!(set.len(), depth / 2);
        }
    }

    #[test]
    fn convnext_stage_hits_each_stage_end() {
        let arch = preset("convnext-t").unwrap();
        let set = placement_layers(PlacementStrategy::Stage, &arch).unwrap();
        // depths (3,3,9,3): stage ends at global 2, 5, 14, 17
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![2, 5, 14, 17]);
    }

    #[test]
    fn convnext_last2_and_last3() {
        let arch = preset("convnext-t").unwrap();
        let l2 = placement_layers(PlacementStrategy::Last2, &arch).unwrap();
        assert_eq!(l2.into_iter().collect::<Vec<_>>(), vec![14, 17]);
        let l3 = placement_layers(PlacementStrategy::Last3, &arch).unwrap();
        // middle of stage 3 (depth 9) is local index 4, global 6 + 4 = 10
        assert_eq!(l3.into_iter().collect::<Vec<_>>(), vec![10, 14, 17]);
    }

    #[test]
    fn convnext_every2_within_stages() {
        let arch = preset("convnext-t").unwrap();
        let set = placement_layers(PlacementStrategy::Every2, &arch).unwrap();
        // stages (3,3,9,3): local odds 1 | 1 | 1,3,5,7 | 1
        assert_eq!(
            set.into_iter().collect::<Vec<_>>(),
            vec![1, 4, 7, 9, 11, 13, 16]
        );
    }

    #[test]
    fn last3_unsupported_on_isotropic() {
        let arch = preset("vit-s").unwrap();
        assert!(matches!(
            placement_layers(PlacementStrategy::Last3, &arch),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            placement_layers(PlacementStrategy::Stage, &arch),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("vit-xxl").is_err());
    }
}
