//! Volume prediction and metric reports.

use super::data::{resize_labels, resize_volume, LabelledVolume};
use crate::error::Result;
use crate::metrics::{Case, MetricReport};
use crate::model::Model;
use crate::tensor::kernels::map_range;
use crate::tensor::{Element, ParamStore, Tensor};

/// Label grid `[H, W, D]` of an image `[C, H, W, D]`. With `input_size`
/// set, slices are resized for the network and the labels back.
pub fn predict<T: Element>(
    model: &Model,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    input_size: Option<usize>,
    batch: usize,
) -> Result<Vec<u8>> {
    let s = image.shape();
    let [h, w, d] = [s[1], s[2], s[3]];
    match input_size {
        Some(size) if (size, size) != (h, w) => {
            let small = model.predict_volume(store, &resize_volume(image, size, size), batch)?;
            Ok(resize_labels(&small, [size, size, d], h, w))
        }
        _ => model.predict_volume(store, image, batch),
    }
}

/// Scores every volume against its labels. Volumes are predicted
/// concurrently.
pub fn evaluate<T: Element>(
    model: &Model,
    store: &ParamStore<T>,
    volumes: &[LabelledVolume<T>],
    input_size: Option<usize>,
    batch: usize,
) -> Result<MetricReport> {
    let work = volumes.iter().map(|v| v.image.numel()).sum::<usize>() * 1024;
    let preds = map_range(volumes.len(), work, |i| predict(model, store, &volumes[i].image, input_size, batch));
    let cases = volumes
        .iter()
        .zip(preds)
        .map(|(v, p)| {
            Ok(Case {
                id: v.id.clone(),
                pred: p?,
                truth: v.labels.clone(),
                dims: v.dims(),
                spacing: v.spacing,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::evaluate(&cases, model.cfg.classes)
}
