//! Attention heatmaps: a grayscale map (bright = high attention) and an
//! overlay where high attention is tinted dark blue.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionArtifacts;
use crate::error::{Error, Result};
use crate::pnm::{GrayImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapChannel {
    SpatialMap,
    #[default]
    Gate,
}

impl HeatmapChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapChannel::SpatialMap => "spatial_map",
            HeatmapChannel::Gate => "gate",
        }
    }
}

impl std::str::FromStr for HeatmapChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial_map" => Ok(HeatmapChannel::SpatialMap),
            "gate" => Ok(HeatmapChannel::Gate),
            _ => Err(Error::Config(format!("unknown heatmap channel `{s}` (expected gate or spatial_map)"))),
        }
    }
}

pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub gray: GrayImage,
    pub overlay: RgbImage,
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        return vec![0.5; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// White at 0, dark blue at 1.
pub fn blue_colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [255.0 * (1.0 - v), 255.0 * (1.0 - v), 255.0 - 115.0 * v]
}

/// Renders a `[h, w]` map at `target = (height, width)` over `image`, which
/// is resized to the target if needed.
pub fn render(map: &[f64], h: usize, w: usize, target: (usize, usize), image: &RgbImage) -> Result<Heatmap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config(format!("heatmap target size must be non-zero, got {th}x{tw}")));
    }
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim("export_heatmap", "map", h * w, map.len()));
    }
    let norm = normalize(map);
    let base = image.resized(tw, th);
    let mut gray = GrayImage {
        width: tw,
        height: th,
        pixels: vec![0; th * tw],
    };
    let mut overlay = RgbImage::new(tw, th);
    for y in 0..th {
        let sy = y * h / th;
        for x in 0..tw {
            let v = norm[sy * w + x * w / tw];
            gray.pixels[y * tw + x] = (255.0 * v).round() as u8;
            let color = blue_colormap(v);
            let i = (y * tw + x) * 3;
            for c in 0..3 {
                let mixed = (1.0 - OVERLAY_ALPHA) * base.pixels[i + c] as f64 + OVERLAY_ALPHA * color[c];
                overlay.pixels[i + c] = mixed.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(Heatmap { gray, overlay })
}

pub fn export_heatmap(
    artifacts: &AttentionArtifacts,
    target: (usize, usize),
    channel: HeatmapChannel,
    image: &RgbImage,
) -> Result<Heatmap> {
    let map = match channel {
        HeatmapChannel::SpatialMap => artifacts.spatial_map.clone(),
        HeatmapChannel::Gate => artifacts.gate_map(),
    };
    let s = map.shape();
    render(map.data(), s[0], s[1], target, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn blank(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h)
    }

    #[test]
    fn constant_map_is_flat_gray() {
        let hm = render(&[0.3; 6], 2, 3, (8, 12), &blank(12, 8)).unwrap();
        assert!(hm.gray.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn single_peak_lights_its_block() {
        let (h, w) = (4, 4);
        let mut map = vec![0.0; h * w];
        map[2 * w + 1] = 1.0;
        let hm = render(&map, h, w, (32, 32), &blank(32, 32)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (16..24).contains(&y) && (8..16).contains(&x);
                assert_eq!(hm.gray.get(x, y), if inside { 255 } else { 0 }, "({x},{y})");
            }
        }
        // high attention is the darkest blue in the overlay
        let peak = hm.overlay.get(10, 18);
        let cold = hm.overlay.get(0, 0);
        assert!(peak[0] < cold[0] && peak[2] < cold[2] && peak[2] > peak[0]);
    }

    #[test]
    fn zero_target_is_config_error() {
        assert!(matches!(render(&[0.0, 1.0], 1, 2, (0, 4), &blank(4, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn channel_names_parse() {
        assert_eq!("gate".parse::<HeatmapChannel>().unwrap(), HeatmapChannel::Gate);
        assert!("gradcam".parse::<HeatmapChannel>().is_err());
    }

    proptest! {
        #[test]
        fn nonconstant_maps_span_full_range(seed in any::<u64>(), h in 1usize..6, w in 2usize..6) {
            let mut rng = Rng::new(seed);
            let map: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
            let hm = render(&map, h, w, (h * 3, w * 2), &blank(w * 2, h * 3)).unwrap();
            prop_assert_eq!(*hm.gray.pixels.iter().min().unwrap(), 0);
            prop_assert_eq!(*hm.gray.pixels.iter().max().unwrap(), 255);
        }
    }
}
