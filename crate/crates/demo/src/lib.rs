//! Browser bindings: draw synthetic fundus images, train a small GCG
//! classifier in the page, and overlay its attention on any image.

use gcg_core::data::{render_image, stratified_splits, to_batch, Split};
use gcg_core::experiment::{train_model, ExperimentConfig};
use gcg_core::heatmap::{export_heatmap, HeatmapChannel};
use gcg_core::model::Model;
use gcg_core::pnm::RgbImage;
use gcg_core::training::Examples;
use gcg_core::{Rng, Tensor};
use wasm_bindgen::prelude::*;

/// Side of the images shown in the page.
pub const VIEW_SIZE: usize = 128;
const INPUT_SIZE: usize = 32;
const PER_CLASS: usize = 40;
pub const NUM_CLASSES: usize = 3;

fn to_js(e: gcg_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn sample_image(class: usize, seed: u64) -> RgbImage {
    render_image(class % NUM_CLASSES, VIEW_SIZE, &mut Rng::new(seed))
}

/// RGBA pixels (`VIEW_SIZE` square) of one synthetic image.
#[wasm_bindgen]
pub fn synthesize(class: usize, seed: u64) -> Vec<u8> {
    rgba(&sample_image(class, seed))
}

#[wasm_bindgen]
pub fn view_size() -> usize {
    VIEW_SIZE
}

/// A compact GCG classifier living in the page.
#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    model: Model,
    probs: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsValue> {
        let mut cfg = ExperimentConfig::compact().with_seed(seed);
        cfg.model.input_size = [INPUT_SIZE, INPUT_SIZE, 3];
        cfg.model.num_classes = NUM_CLASSES;
        cfg.train.batch_size = 16;
        let model = Model::build(cfg.model.clone(), cfg.model_seed()).map_err(to_js)?;
        Ok(Demo { cfg, model, probs: vec![] })
    }

    /// Trains from scratch on a fresh synthetic set and keeps the best
    /// epoch. Returns its validation accuracy.
    pub fn train(&mut self, epochs: usize) -> Result<f64, JsValue> {
        let mut cfg = self.cfg.clone();
        cfg.train.epochs = epochs.max(1);
        let labels: Vec<usize> = (0..NUM_CLASSES * PER_CLASS).map(|i| i / PER_CLASS).collect();
        let images: Vec<RgbImage> = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| render_image(c, 2 * INPUT_SIZE, &mut Rng::new(Rng::derive(cfg.seed, i as u64))))
            .collect();
        let splits = stratified_splits(&labels, 0.25, 0.0, &mut Rng::new(Rng::derive(cfg.seed, 12)));
        let pick = |want: Split| -> Result<Examples, JsValue> {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| splits[i] == want).collect();
            let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &images[i]).collect();
            let x = to_batch(&imgs, INPUT_SIZE, INPUT_SIZE).map_err(to_js)?;
            Examples::new(x, idx.iter().map(|&i| labels[i]).collect()).map_err(to_js)
        };
        let (train, val) = (pick(Split::Train)?, pick(Split::Val)?);
        let (model, outcome) = train_model(&cfg, &train, &val, |_| {}).map_err(to_js)?;
        self.model = model;
        Ok(outcome.best_val_accuracy)
    }

    /// Overlay of the attention `channel` ("gate" or "spatial_map") on
    /// the image `synthesize(class, seed)`, as RGBA.
    pub fn explain(&mut self, class: usize, seed: u64, channel: &str) -> Result<Vec<u8>, JsValue> {
        let channel: HeatmapChannel = channel.parse().map_err(to_js)?;
        let img = sample_image(class, seed);
        let x = Tensor::new(vec![INPUT_SIZE, INPUT_SIZE, 3], img.resized(INPUT_SIZE, INPUT_SIZE).to_unit())
            .map_err(to_js)?;
        let inf = self.model.infer(&x).map_err(to_js)?;
        self.probs = inf.probs.data().to_vec();
        let hm = export_heatmap(&inf.artifacts[0], (VIEW_SIZE, VIEW_SIZE), channel, &img).map_err(to_js)?;
        Ok(rgba(&hm.overlay))
    }

    /// Class probabilities from the last `explain` call.
    pub fn probs(&self) -> Vec<f64> {
        self.probs.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesize_is_rgba_and_deterministic() {
        let a = synthesize(1, 5);
        assert_eq!(a.len(), VIEW_SIZE * VIEW_SIZE * 4);
        assert!(a.chunks(4).all(|p| p[3] == 255));
        assert_eq!(a, synthesize(1, 5));
        assert_ne!(a, synthesize(1, 6));
    }

    #[test]
    fn explain_untrained_and_after_one_epoch() {
        let mut demo = Demo::new(3).unwrap();
        let before = demo.explain(2, 9, "gate").unwrap();
        assert_eq!(before.len(), VIEW_SIZE * VIEW_SIZE * 4);
        let p = demo.probs();
        assert_eq!(p.len(), NUM_CLASSES);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let acc = demo.train(1).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(demo.explain(2, 9, "spatial_map").unwrap().len(), before.len());
    }
}
