//! The SwinIQA metric: backbone, fused pyramid, distance head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Graph, Var};
use crate::backbone::{fuse_on, BackboneConfig, SwinBackbone};
use crate::error::{Error, Result};
use crate::head::{DistanceHead, HeadConfig, MappingMode};
use crate::image::{normalize, ChannelStats, ImageTensor};
use crate::metric::{archive_kind, check_pair, FrozenFilter, LearnedMetric};
use crate::params::ParamStore;

pub const KIND: &str = "swiniqa";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwinIqaConfig {
    pub backbone: BackboneConfig,
    pub head_dim: usize,
    pub head_heads: usize,
    pub mode: MappingMode,
    pub stats: ChannelStats,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl SwinIqaConfig {
    pub fn swin_t(mode: MappingMode) -> Self {
        SwinIqaConfig {
            backbone: BackboneConfig::swin_t(),
            head_dim: 256,
            head_heads: 4,
            mode,
            stats: ChannelStats::IMAGENET,
            seed: 0,
            freeze_backbone: false,
        }
    }

    pub fn tiny_test(mode: MappingMode) -> Self {
        SwinIqaConfig {
            backbone: BackboneConfig::tiny_test(),
            head_dim: 32,
            head_heads: 2,
            ..Self::swin_t(mode)
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.backbone.fused_channels(),
            dim: self.head_dim,
            heads: self.head_heads,
            mode: self.mode,
        }
    }
}

pub struct SwinIqa {
    config: SwinIqaConfig,
    backbone: SwinBackbone,
    head: DistanceHead,
    store: ParamStore,
}

impl SwinIqa {
    /// Seeded initialization; loads the backbone's pretrained archive when
    /// the configuration names one.
    pub fn new(config: SwinIqaConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = SwinBackbone::register(&config.backbone, &mut store, "backbone.", &mut rng)?;
        let head = DistanceHead::register(&config.head_config(), &mut store, "head.", &mut rng)?;
        if let Some(path) = &config.backbone.pretrained_weights {
            let archive = Archive::load(path)?;
            let prefix = if archive.tensors.contains_key("patch_embed.proj.weight") {
                ""
            } else {
                "backbone."
            };
            backbone.load_pretrained(&mut store, &archive, prefix)?;
        }
        Ok(SwinIqa {
            config,
            backbone,
            head,
            store,
        })
    }

    /// Rebuilds a model from a checkpoint written by [`LearnedMetric::to_archive`].
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let kind = archive_kind(archive)?;
        if kind != KIND {
            return Err(Error::Archive(format!("checkpoint holds a `{kind}` model, not `{KIND}`")));
        }
        let mut config: SwinIqaConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| Error::Archive(format!("model configuration: {e}")))?;
        config.backbone.pretrained_weights = None;
        let mut model = Self::new(config)?;
        model.store.load_from(archive, "backbone.", "backbone.")?;
        model.store.load_from(archive, "head.", "head.")?;
        Ok(model)
    }

    pub fn config(&self) -> &SwinIqaConfig {
        &self.config
    }

    pub fn set_freeze_backbone(&mut self, freeze: bool) {
        self.config.freeze_backbone = freeze;
    }

    pub fn head(&self) -> &DistanceHead {
        &self.head
    }

    /// Distances evaluated with an external parameter store of the same
    /// layout.
    pub fn distances_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reference: &ImageTensor,
        dists: &[&ImageTensor],
    ) -> Result<Vec<Var>> {
        let fr = self.fused_with(g, store, reference)?;
        dists
            .iter()
            .map(|d| {
                check_pair(reference, d)?;
                let fd = self.fused_with(g, store, d)?;
                self.head.distance(g, store, fr, fd)
            })
            .collect()
    }

    /// Fused `[H/8·W/8, 22C]` feature of an image on the graph.
    pub fn fused_on(&self, g: &mut Graph, img: &ImageTensor) -> Result<Var> {
        self.fused_with(g, &self.store, img)
    }

    fn fused_with(&self, g: &mut Graph, store: &ParamStore, img: &ImageTensor) -> Result<Var> {
        let m = self.config.backbone.input_multiple();
        let (h, w) = (img.height().div_ceil(m) * m, img.width().div_ceil(m) * m);
        let padded = img.reflect_pad_to(h, w);
        let x = normalize(&padded, &self.config.stats)?;
        let x = g.constant(x.data, &[h * w, 3]);
        let sv = self.backbone.forward(g, store, x, h, w)?;
        let (f, _) = fuse_on(g, &sv)?;
        if g.value(f).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                block: "backbone".into(),
            });
        }
        Ok(f)
    }
}

impl LearnedMetric for SwinIqa {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn frozen(&self) -> FrozenFilter {
        if self.config.freeze_backbone {
            Arc::new(|n: &str| n.starts_with("backbone."))
        } else {
            Arc::new(|_: &str| false)
        }
    }

    fn distances_on(&self, g: &mut Graph, reference: &ImageTensor, dists: &[&ImageTensor]) -> Result<Vec<Var>> {
        self.distances_with(g, &self.store, reference, dists)
    }

    fn to_archive(&self) -> Archive {
        let mut a = Archive {
            meta: serde_json::json!({ "metric": KIND, "config": self.config }),
            ..Archive::default()
        };
        self.store.export_into(&mut a, "");
        a
    }

    fn input_multiple(&self) -> usize {
        self.config.backbone.input_multiple()
    }
}
