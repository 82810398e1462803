//! Browser bindings: synthesize a scene, map its ambiguity and margins,
//! and fit a small segmentation model in place.

use ambiseg::aef::{ambiguity_map, AefConfig};
use ambiseg::cloudgeom::{synth_scene, PointCloud, SceneKind, SceneSpec};
use ambiseg::margin_contrast::{margin, MarginConfig};
use ambiseg::nettrain::{train_model, Model, ModelConfig};
use wasm_bindgen::prelude::*;

fn js_error(e: ambiseg::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// A labeled synthetic cloud held on the Rust side.
#[wasm_bindgen]
pub struct Scene {
    cloud: PointCloud,
}

/// Result of fitting a model to a scene.
#[wasm_bindgen]
pub struct Fit {
    labels: Vec<u32>,
    ambiguity: Vec<f64>,
    losses: Vec<f64>,
    accuracy: f64,
}

impl Scene {
    pub fn build(kind: &str, points_per_class: usize, noise: f64, seed: u64) -> ambiseg::Result<Self> {
        let kind: SceneKind = kind.parse()?;
        let cloud = synth_scene(&SceneSpec::new(kind, points_per_class, noise, seed))?;
        Ok(Self { cloud })
    }

    pub fn ambiguity_with(&self, k: usize, beta: f64) -> ambiseg::Result<Vec<f64>> {
        let cfg = AefConfig {
            k: k.min(self.cloud.len()),
            beta,
            ..AefConfig::default()
        };
        Ok(ambiguity_map(&self.cloud, &cfg)?.values)
    }

    pub fn fit_with(&self, epochs: usize, seed: u64) -> ambiseg::Result<Fit> {
        let cfg = ModelConfig {
            dims: vec![8, 16],
            epochs,
            loops: 2,
            seed,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 3 + self.cloud.feature_dim(), self.cloud.num_classes())?;
        let mut losses = Vec::with_capacity(epochs);
        let outcome = train_model(model, std::slice::from_ref(&self.cloud), |_, r| {
            losses.push(r.l_total)
        })?;
        let pred = outcome.model.predict(&self.cloud)?;
        let hits = pred
            .labels
            .iter()
            .zip(self.cloud.labels())
            .filter(|(p, g)| p == g)
            .count();
        Ok(Fit {
            labels: pred.labels.iter().map(|&l| l as u32).collect(),
            ambiguity: pred.point_ambiguity,
            losses,
            accuracy: 100.0 * hits as f64 / self.cloud.len() as f64,
        })
    }
}

#[wasm_bindgen]
impl Scene {
    /// `kind` is one of `two-rooms`, `planar-boundary`, `checker-columns`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, points_per_class: u32, noise: f64, seed: u32) -> Result<Scene, JsValue> {
        Self::build(kind, points_per_class as usize, noise, seed as u64).map_err(js_error)
    }

    pub fn len(&self) -> u32 {
        self.cloud.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn classes(&self) -> u32 {
        self.cloud.num_classes() as u32
    }

    /// Flat `x, y, z` triples.
    pub fn positions(&self) -> Vec<f64> {
        self.cloud.positions().iter().flatten().copied().collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.cloud.labels().iter().map(|&l| l as u32).collect()
    }

    /// Ground-truth ambiguity of every point at neighborhood size `k`.
    pub fn ambiguity(&self, k: u32, beta: f64) -> Result<Vec<f64>, JsValue> {
        self.ambiguity_with(k as usize, beta).map_err(js_error)
    }

    /// Trains a small model on this scene and labels it.
    pub fn fit(&self, epochs: u32, seed: u32) -> Result<Fit, JsValue> {
        self.fit_with(epochs as usize, seed as u64).map_err(js_error)
    }
}

#[wasm_bindgen]
impl Fit {
    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    /// Predicted ambiguity of every input point.
    pub fn ambiguity(&self) -> Vec<f64> {
        self.ambiguity.clone()
    }

    /// Total loss per epoch.
    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Percentage of points labeled correctly.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }
}

/// Contrastive margin `mu * a + nu` for an ambiguity `a`.
#[wasm_bindgen(js_name = marginFor)]
pub fn margin_for(a: f64, mu: f64, nu: f64) -> f64 {
    margin(
        a,
        &MarginConfig {
            mu,
            nu,
            ..MarginConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_exposes_flat_positions() {
        let s = Scene::build("planar-boundary", 50, 0.02, 1).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.positions().len(), 300);
        assert_eq!(s.labels().len(), 100);
        assert_eq!(s.classes(), 2);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(Scene::build("spiral", 10, 0.0, 0).is_err());
    }

    #[test]
    fn ambiguity_grows_with_neighborhood() {
        let s = Scene::build("planar-boundary", 200, 0.02, 2).unwrap();
        let count = |k| {
            s.ambiguity_with(k, 0.04)
                .unwrap()
                .iter()
                .filter(|&&a| a > 0.0)
                .count()
        };
        assert!(count(8) <= count(32));
        assert!(count(32) > 0);
        assert!(s
            .ambiguity_with(1000, 0.04)
            .unwrap()
            .iter()
            .all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn margin_matches_affine_map() {
        assert_eq!(margin_for(0.0, -1.0, 0.5), 0.5);
        assert_eq!(margin_for(1.0, -1.0, 0.5), -0.5);
    }

    #[test]
    fn short_fit_labels_every_point() {
        let s = Scene::build("planar-boundary", 64, 0.02, 3).unwrap();
        let fit = s.fit_with(3, 0).unwrap();
        assert_eq!(fit.labels().len(), 128);
        assert_eq!(fit.losses().len(), 3);
        assert!(fit.labels().iter().all(|&l| l < 2));
        assert!(fit.ambiguity().iter().all(|a| (0.0..=1.0).contains(a)));
        assert!((0.0..=100.0).contains(&fit.accuracy()));
    }
}
