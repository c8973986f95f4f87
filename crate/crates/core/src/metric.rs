//! Common interface of the trainable metrics.

use crate::archive::Archive;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::ParamStore;

pub type FrozenFilter = crate::autodiff::NameFilter;

/// A distance network with parameters that the training loop can update.
pub trait LearnedMetric: Send + Sync {
    /// Short lowercase identifier, e.g. `"swiniqa"`.
    fn kind(&self) -> &'static str;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    /// Names of parameters that must not be updated.
    fn frozen(&self) -> FrozenFilter;

    /// Distances from `reference` to each image of `dists` built on one
    /// graph; reference features are computed once.
    fn distances_on(&self, g: &mut Graph, reference: &ImageTensor, dists: &[&ImageTensor]) -> Result<Vec<Var>>;

    /// Restores parameter constraints after an update.
    fn project(&mut self) {}

    /// Parameters and configuration echo.
    fn to_archive(&self) -> Archive;

    /// Side lengths accepted without padding are multiples of this.
    fn input_multiple(&self) -> usize {
        1
    }

    /// Inference-mode distance of a single pair.
    fn score(&self, reference: &ImageTensor, dist: &ImageTensor) -> Result<f64> {
        let mut g = Graph::inference();
        let d = self.distances_on(&mut g, reference, &[dist])?;
        Ok(g.scalar(d[0]))
    }
}

pub(crate) fn check_pair(reference: &ImageTensor, dist: &ImageTensor) -> Result<()> {
    if (reference.height(), reference.width()) != (dist.height(), dist.width()) {
        return Err(Error::Shape(format!(
            "reference is {}x{} but distorted image is {}x{}",
            reference.height(),
            reference.width(),
            dist.height(),
            dist.width()
        )));
    }
    Ok(())
}

/// Reads the metric identifier stored in a checkpoint's metadata.
pub fn archive_kind(archive: &Archive) -> Result<String> {
    archive
        .meta
        .get("metric")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Archive("checkpoint metadata lacks a `metric` entry".into()))
}

/// Rebuilds whichever learned metric a checkpoint holds.
pub fn load_learned(archive: &Archive) -> Result<Box<dyn LearnedMetric>> {
    match archive_kind(archive)?.as_str() {
        crate::swiniqa::KIND => Ok(Box::new(crate::swiniqa::SwinIqa::from_archive(archive)?)),
        crate::dpis::KIND => Ok(Box::new(crate::dpis::Dpis::from_archive(archive)?)),
        other => Err(Error::Archive(format!("unknown metric `{other}` in checkpoint"))),
    }
}
