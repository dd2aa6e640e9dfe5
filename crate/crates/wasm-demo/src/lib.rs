//! Browser demo: render the default scenario, run the epipolar warm start and
//! fit the curve, all in the page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use backbone_recon::curve::CurveParams;
use backbone_recon::epipolar::{warm_start, WarmStartConfig};
use backbone_recon::eval::{max_deviation_recon_to_truth, reconstruct, sample_curve, simulate, Scenario};
use backbone_recon::icp::SolverConfig;
use backbone_recon::raster::BinaryImage;
use backbone_recon::Result;

/// Downsampling factor of the previews.
pub const PREVIEW_FACTOR: u32 = 4;

#[derive(Debug, Clone, Serialize)]
pub struct Polyline {
    pub view: usize,
    /// Preview-pixel coordinates, `[u, v]`.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WarmStartSummary {
    pub points: usize,
    pub fit_rms_mm: f64,
    pub max_dev_mm: f64,
    pub skeletons: Vec<Polyline>,
    pub curve: Vec<Polyline>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub max_dev_mm: f64,
    pub initial_cost: f64,
    pub epoch_costs: Vec<f64>,
    pub warm: bool,
    pub curve: Vec<Polyline>,
}

pub struct Demo {
    base: Scenario,
    scenario: Scenario,
    images: Vec<BinaryImage>,
    guess: Option<Vec<f64>>,
}

impl Demo {
    pub fn new() -> Result<Self> {
        let base = Scenario::standard();
        let images = simulate(&base)?.images;
        Ok(Self {
            scenario: base.clone(),
            base,
            images,
            guess: None,
        })
    }

    /// Scales the default bending by `bend` and re-renders with `radius`.
    pub fn set_scene(&mut self, bend: f64, radius: u32) -> Result<()> {
        let mut s = self.base.clone();
        for t in &mut s.truth.theta {
            *t *= bend;
        }
        s.dilation_radius = radius;
        s.validate()?;
        self.images = simulate(&s)?.images;
        self.scenario = s;
        self.guess = None;
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.images.len()
    }

    pub fn preview_size(&self) -> (u32, u32) {
        let img = &self.images[0];
        (
            img.width().div_ceil(PREVIEW_FACTOR),
            img.height().div_ceil(PREVIEW_FACTOR),
        )
    }

    /// Grayscale preview of one view; a block is white if any pixel is.
    pub fn preview(&self, view: usize) -> Vec<u8> {
        let img = &self.images[view];
        let (w, h) = self.preview_size();
        let mut out = vec![0u8; (w * h) as usize];
        for (u, v) in img.white_pixels() {
            out[((v / PREVIEW_FACTOR) * w + u / PREVIEW_FACTOR) as usize] = 255;
        }
        out
    }

    fn project(&self, params: &CurveParams) -> Result<Vec<Polyline>> {
        let samples = sample_curve(params, &self.scenario.grid)?;
        let f = PREVIEW_FACTOR as f64;
        Ok(self
            .scenario
            .rig
            .cameras
            .iter()
            .enumerate()
            .map(|(view, cam)| Polyline {
                view,
                points: samples
                    .points
                    .iter()
                    .step_by(10)
                    .filter_map(|p| cam.project(p).ok())
                    .map(|px| [px.x / f, px.y / f])
                    .collect(),
            })
            .collect())
    }

    pub fn warm_start(&mut self) -> Result<WarmStartSummary> {
        let truth = self.scenario.truth_params()?;
        let hints = self.scenario.base_hints()?;
        let ws = warm_start(
            &self.images,
            &self.scenario.rig,
            &hints,
            &self.scenario.grid,
            truth.base_position,
            truth.base_orientation,
            &WarmStartConfig::default(),
        )?;
        let guess = truth.with_theta(ws.guess.theta.clone());
        let f = PREVIEW_FACTOR as f64;
        let summary = WarmStartSummary {
            points: ws.points.len(),
            fit_rms_mm: ws.guess.rms,
            max_dev_mm: max_deviation_recon_to_truth(&guess, &truth, &self.scenario.grid)?,
            skeletons: ws
                .skeletons
                .iter()
                .map(|s| Polyline {
                    view: s.view,
                    points: s
                        .pixels
                        .iter()
                        .step_by(8)
                        .map(|&[u, v]| [u as f64 / f, v as f64 / f])
                        .collect(),
                })
                .collect(),
            curve: self.project(&guess)?,
        };
        self.guess = Some(ws.guess.theta);
        Ok(summary)
    }

    /// One-Step fit; starts from the last warm start when `warm` is set.
    pub fn fit(&self, p: f64, epochs: usize, warm: bool, seed: u64) -> Result<FitSummary> {
        let truth = self.scenario.truth_params()?;
        let cfg = SolverConfig {
            p,
            epochs,
            seed,
            alpha_schedule: vec![(epochs, 0.2)],
            ..SolverConfig::default()
        };
        let theta0 = if warm { self.guess.as_deref() } else { None };
        let rec = reconstruct(
            &self.images,
            &self.scenario.rig,
            &self.scenario.grid,
            truth.base_position,
            truth.base_orientation,
            &cfg,
            theta0,
        )?;
        Ok(FitSummary {
            max_dev_mm: max_deviation_recon_to_truth(&rec.params, &truth, &self.scenario.grid)?,
            initial_cost: rec.output.trace.initial_cost,
            epoch_costs: rec.output.trace.epoch_costs.clone(),
            warm: theta0.is_some(),
            curve: self.project(&rec.params)?,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen]
pub struct DemoApp {
    inner: Demo,
}

#[wasm_bindgen]
impl DemoApp {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<DemoApp, JsValue> {
        Ok(Self {
            inner: Demo::new().map_err(js_err)?,
        })
    }

    pub fn set_scene(&mut self, bend: f64, radius: u32) -> Result<(), JsValue> {
        self.inner.set_scene(bend, radius).map_err(js_err)
    }

    pub fn views(&self) -> usize {
        self.inner.views()
    }

    pub fn preview_width(&self) -> u32 {
        self.inner.preview_size().0
    }

    pub fn preview_height(&self) -> u32 {
        self.inner.preview_size().1
    }

    pub fn preview(&self, view: usize) -> Result<Vec<u8>, JsValue> {
        if view >= self.inner.views() {
            return Err(js_err(format!("no view {view}")));
        }
        Ok(self.inner.preview(view))
    }

    /// JSON [`WarmStartSummary`].
    pub fn warm_start(&mut self) -> Result<String, JsValue> {
        to_json(&self.inner.warm_start().map_err(js_err)?)
    }

    /// JSON [`FitSummary`].
    pub fn fit(&self, p: f64, epochs: usize, warm: bool, seed: u32) -> Result<String, JsValue> {
        to_json(&self.inner.fit(p, epochs, warm, seed as u64).map_err(js_err)?)
    }
}
