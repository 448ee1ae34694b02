//! Structured captions: clip quality scoring, threshold filtering,
//! multi-view fusion, schema validation, and a deterministic
//! feature-hashing text embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("field {field}: value {value:?} is not in the option set")]
    BadEnum { field: &'static str, value: String },
    #[error("object {index}: {reason}")]
    BadBbox { index: usize, reason: String },
    #[error("invalid subscores: {0}")]
    BadScores(String),
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("duplicate view id {0}")]
    DuplicateView(u32),
    #[error("caption set has no views")]
    NoViews,
    #[error("embedding dim {0} below minimum 8")]
    BadDim(usize),
}

pub const TIME_OPTIONS: [&str; 4] = ["Daytime", "Night", "Indoor", "No visible sign"];
pub const WEATHER_OPTIONS: [&str; 6] = [
    "Sunny",
    "Cloudy",
    "Overcast",
    "Rain",
    "Snow",
    "Night with no visible sign",
];
pub const ROAD_TYPE_OPTIONS: [&str; 6] = [
    "Highway",
    "Urban Road",
    "Rural Road",
    "Tunnel",
    "Bridge",
    "No visible sign",
];
pub const ROAD_SURFACE_OPTIONS: [&str; 4] = ["Asphalt", "Concrete", "Gravel", "resin (Indoor)"];
pub const LANE_OPTIONS: [&str; 5] = [
    "No visible sign",
    "Single Lane",
    "Dual Lane",
    "Multi-Lane",
    "Other",
];
pub const ENVIRONMENT_OPTIONS: [&str; 10] = [
    "Highway",
    "Roundabout",
    "Intersection",
    "Ramp",
    "Tunnel",
    "Parking Lot",
    "Urban Road",
    "Rural Road",
    "Bridge",
    "Other",
];

/// Scene-level environment record. The first six fields are drawn from fixed
/// option sets; surroundings and traffic are free text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub time: String,
    pub weather: String,
    pub road_type: String,
    pub road_surface: String,
    pub lane: String,
    pub environment_type: String,
    pub surroundings: String,
    pub traffic: String,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<(), CaptionError> {
        let checks: [(&'static str, &str, &[&str]); 6] = [
            ("time", &self.time, &TIME_OPTIONS),
            ("weather", &self.weather, &WEATHER_OPTIONS),
            ("road_type", &self.road_type, &ROAD_TYPE_OPTIONS),
            ("road_surface", &self.road_surface, &ROAD_SURFACE_OPTIONS),
            ("lane", &self.lane, &LANE_OPTIONS),
            ("environment_type", &self.environment_type, &ENVIRONMENT_OPTIONS),
        ];
        for (field, value, options) in checks {
            if !options.contains(&value) {
                return Err(CaptionError::BadEnum { field, value: value.to_string() });
            }
        }
        Ok(())
    }
}

/// Grounded object annotation: category, pixel bbox, description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    /// (x1, y1, x2, y2) with x1 < x2, y1 < y2.
    pub bbox: [f64; 4],
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredCaption {
    pub scene: SceneRecord,
    pub objects: Vec<ObjectAnnotation>,
}

/// Validates the record and every bbox, naming the offending field.
pub fn build_structured_caption(
    scene: SceneRecord,
    objects: Vec<ObjectAnnotation>,
) -> Result<StructuredCaption, CaptionError> {
    scene.validate()?;
    for (index, o) in objects.iter().enumerate() {
        let [x1, y1, x2, y2] = o.bbox;
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(CaptionError::BadBbox { index, reason: "non-finite coordinate".into() });
        }
        if x1 >= x2 {
            return Err(CaptionError::BadBbox { index, reason: format!("x1 {x1} >= x2 {x2}") });
        }
        if y1 >= y2 {
            return Err(CaptionError::BadBbox { index, reason: format!("y1 {y1} >= y2 {y2}") });
        }
    }
    Ok(StructuredCaption { scene, objects })
}

/// Weighted clip quality score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub q_clarity: f64,
    pub q_structure: f64,
    pub q_aesthetics: f64,
    pub lambdas: [f64; 3],
    pub s: f64,
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

pub fn score_clip(q: [f64; 3], lambdas: [f64; 3]) -> Result<ClipScore, CaptionError> {
    if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CaptionError::BadScores(format!("subscores {q:?} outside [0, 1]")));
    }
    if lambdas.iter().any(|v| *v < 0.0) {
        return Err(CaptionError::BadWeights(format!("negative weight in {lambdas:?}")));
    }
    let sum: f64 = lambdas.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(CaptionError::BadWeights(format!("weights sum to {sum}")));
    }
    let s = lambdas[0] * q[0] + lambdas[1] * q[1] + lambdas[2] * q[2];
    Ok(ClipScore { q_clarity: q[0], q_structure: q[1], q_aesthetics: q[2], lambdas, s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub id: u32,
    pub score: f64,
}

/// Keeps exactly the clips with score >= tau, in input order.
pub fn filter_clips(clips: &[ScoredClip], tau: f64) -> Vec<u32> {
    clips.iter().filter(|c| c.score >= tau).map(|c| c.id).collect()
}

/// Per-view captions with unique view ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCaptionSet {
    pub views: Vec<(u32, StructuredCaption)>,
}

impl ViewCaptionSet {
    pub fn new(views: Vec<(u32, StructuredCaption)>) -> Result<Self, CaptionError> {
        if views.is_empty() {
            return Err(CaptionError::NoViews);
        }
        let mut ids: Vec<u32> = views.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(CaptionError::DuplicateView(pair[0]));
            }
        }
        Ok(ViewCaptionSet { views })
    }
}

/// Majority vote over values; ties resolved toward the value held by the
/// lowest view id among the tied values.
fn vote<'a>(entries: &[(u32, &'a str)]) -> &'a str {
    let mut best: Option<(&str, usize, u32)> = None;
    for &(id, value) in entries {
        let count = entries.iter().filter(|(_, v)| *v == value).count();
        let first_id = entries
            .iter()
            .filter(|(_, v)| *v == value)
            .map(|(i, _)| *i)
            .min()
            .unwrap();
        let candidate = (value, count, first_id);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                if count > cur.1 || (count == cur.1 && first_id < cur.2) {
                    candidate
                } else {
                    cur
                }
            }
        });
        let _ = id;
    }
    best.unwrap().0
}

/// Fuses per-view captions: field-wise majority vote for the scene record,
/// object dedupe on (category, description) keeping the lowest view id's
/// bbox. Deterministic and independent of input view order.
pub fn fuse_captions(set: &ViewCaptionSet) -> Result<StructuredCaption, CaptionError> {
    if set.views.is_empty() {
        return Err(CaptionError::NoViews);
    }
    let mut ordered: Vec<&(u32, StructuredCaption)> = set.views.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);

    let field = |f: fn(&SceneRecord) -> &str| -> String {
        let entries: Vec<(u32, &str)> =
            ordered.iter().map(|(id, c)| (*id, f(&c.scene))).collect();
        vote(&entries).to_string()
    };
    let scene = SceneRecord {
        time: field(|s| &s.time),
        weather: field(|s| &s.weather),
        road_type: field(|s| &s.road_type),
        road_surface: field(|s| &s.road_surface),
        lane: field(|s| &s.lane),
        environment_type: field(|s| &s.environment_type),
        surroundings: field(|s| &s.surroundings),
        traffic: field(|s| &s.traffic),
    };

    let mut objects: Vec<ObjectAnnotation> = Vec::new();
    for (_, cap) in &ordered {
        for o in &cap.objects {
            let dup = objects
                .iter()
                .any(|k| k.category == o.category && k.description == o.description);
            if !dup {
                objects.push(o.clone());
            }
        }
    }
    build_structured_caption(scene, objects)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic feature-hashing embedding of the canonical JSON form:
/// each token lands at `hash % dim` with a hash-derived sign, then the
/// vector is normalized to unit length (an all-zero vector stays zero).
pub fn caption_embed(caption: &StructuredCaption, dim: usize) -> Result<Vec<f64>, CaptionError> {
    if dim < 8 {
        return Err(CaptionError::BadDim(dim));
    }
    let canonical = serde_json::to_string(caption).expect("caption serializes");
    let mut out = vec![0.0; dim];
    for token in canonical.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(token.as_bytes());
        let idx = (h % dim as u64) as usize;
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        out[idx] += sign;
    }
    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in out.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Reference heuristic clarity scorer: normalized gradient energy of a
/// grayscale image, mapped into [0, 1].
pub fn sharpness_score(pixels: &[f64], width: usize, height: usize) -> Result<f64, CaptionError> {
    if pixels.len() != width * height {
        return Err(CaptionError::BadScores(format!(
            "{} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    if width < 2 || height < 2 {
        return Ok(0.0);
    }
    let mut energy = 0.0;
    for r in 0..height {
        for c in 0..width {
            let v = pixels[r * width + c];
            if c + 1 < width {
                energy += (pixels[r * width + c + 1] - v).powi(2);
            }
            if r + 1 < height {
                energy += (pixels[(r + 1) * width + c] - v).powi(2);
            }
        }
    }
    let mean = energy / (width * height) as f64;
    Ok(mean / (1.0 + mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneRecord {
        SceneRecord {
            time: "Daytime".into(),
            weather: "Sunny".into(),
            road_type: "Urban Road".into(),
            road_surface: "Asphalt".into(),
            lane: "Dual Lane".into(),
            environment_type: "Intersection".into(),
            surroundings: "a busy street".into(),
            traffic: "Front car moving forward".into(),
        }
    }

    fn object(cat: &str, desc: &str) -> ObjectAnnotation {
        ObjectAnnotation { category: cat.into(), bbox: [0.0, 0.0, 10.0, 10.0], description: desc.into() }
    }

    #[test]
    fn score_matches_hand_arithmetic() {
        let s = score_clip([0.8, 0.6, 1.0], [0.5, 0.3, 0.2]).unwrap();
        assert!((s.s - 0.78).abs() < 1e-12);
        let uniform = score_clip([0.4, 0.4, 0.4], [1.0 / 3.0; 3]).unwrap();
        assert!((uniform.s - 0.4).abs() < 1e-12);
        assert_eq!(score_clip([0.0; 3], [0.5, 0.3, 0.2]).unwrap().s, 0.0);
    }

    #[test]
    fn score_is_monotone_in_subscores() {
        let base = score_clip([0.5, 0.5, 0.5], [0.5, 0.3, 0.2]).unwrap();
        for i in 0..3 {
            let mut q = [0.5; 3];
            q[i] = 0.9;
            assert!(score_clip(q, [0.5, 0.3, 0.2]).unwrap().s >= base.s);
        }
    }

    #[test]
    fn score_rejects_bad_inputs() {
        assert!(score_clip([1.2, 0.0, 0.0], [0.5, 0.3, 0.2]).is_err());
        assert!(score_clip([0.5; 3], [0.5, 0.5, 0.5]).is_err());
        assert!(score_clip([0.5; 3], [-0.2, 0.6, 0.6]).is_err());
    }

    #[test]
    fn filter_threshold_and_idempotence() {
        let clips = [
            ScoredClip { id: 1, score: 0.3 },
            ScoredClip { id: 2, score: 0.7 },
            ScoredClip { id: 3, score: 0.9 },
        ];
        assert_eq!(filter_clips(&clips, 0.5), vec![2, 3]);
        assert_eq!(filter_clips(&clips, 0.0), vec![1, 2, 3]);
        assert_eq!(filter_clips(&clips, 1.0), Vec::<u32>::new());
        let kept: Vec<ScoredClip> = clips.iter().filter(|c| c.score >= 0.5).copied().collect();
        assert_eq!(filter_clips(&kept, 0.5), filter_clips(&clips, 0.5));
    }

    #[test]
    fn build_rejects_out_of_vocabulary_and_bad_boxes() {
        let mut bad = scene();
        bad.weather = "Foggy".into();
        let err = build_structured_caption(bad, vec![]).unwrap_err();
        assert!(matches!(err, CaptionError::BadEnum { field: "weather", .. }));
        let mut bad_box = object("car", "x");
        bad_box.bbox = [5.0, 5.0, 2.0, 9.0];
        assert!(matches!(
            build_structured_caption(scene(), vec![bad_box]),
            Err(CaptionError::BadBbox { index: 0, .. })
        ));
        assert!(build_structured_caption(scene(), vec![]).is_ok());
    }

    #[test]
    fn every_out_of_vocab_value_is_rejected() {
        let fields: [(&str, fn(&mut SceneRecord)); 6] = [
            ("time", |s| s.time = "Dawn".into()),
            ("weather", |s| s.weather = "Foggy".into()),
            ("road_type", |s| s.road_type = "Dirt".into()),
            ("road_surface", |s| s.road_surface = "Mud".into()),
            ("lane", |s| s.lane = "Five Lane".into()),
            ("environment_type", |s| s.environment_type = "Desert".into()),
        ];
        for (name, mutate) in fields {
            let mut s = scene();
            mutate(&mut s);
            let err = s.validate().unwrap_err();
            match err {
                CaptionError::BadEnum { field, .. } => assert_eq!(field, name),
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn fusion_majority_and_tiebreak() {
        let mut sunny = scene();
        sunny.weather = "Sunny".into();
        let mut rain = scene();
        rain.weather = "Rain".into();
        let set = ViewCaptionSet::new(vec![
            (2, StructuredCaption { scene: sunny.clone(), objects: vec![] }),
            (0, StructuredCaption { scene: sunny.clone(), objects: vec![] }),
            (1, StructuredCaption { scene: rain.clone(), objects: vec![] }),
        ])
        .unwrap();
        assert_eq!(fuse_captions(&set).unwrap().scene.weather, "Sunny");
        // 1-1 tie: lowest view id (0) wins.
        let tied = ViewCaptionSet::new(vec![
            (1, StructuredCaption { scene: sunny.clone(), objects: vec![] }),
            (0, StructuredCaption { scene: rain, objects: vec![] }),
        ])
        .unwrap();
        assert_eq!(fuse_captions(&tied).unwrap().scene.weather, "Rain");
    }

    #[test]
    fn fusion_dedupes_objects_and_keeps_lowest_view_bbox() {
        let mut a = object("car", "red sedan");
        a.bbox = [1.0, 1.0, 2.0, 2.0];
        let mut b = object("car", "red sedan");
        b.bbox = [5.0, 5.0, 6.0, 6.0];
        let set = ViewCaptionSet::new(vec![
            (3, StructuredCaption { scene: scene(), objects: vec![b] }),
            (1, StructuredCaption { scene: scene(), objects: vec![a.clone(), object("truck", "van")] }),
        ])
        .unwrap();
        let fused = fuse_captions(&set).unwrap();
        assert_eq!(fused.objects.len(), 2);
        assert_eq!(fused.objects[0].bbox, a.bbox);
    }

    #[test]
    fn fusion_is_view_order_invariant() {
        let caps: Vec<(u32, StructuredCaption)> = (0..4)
            .map(|i| {
                let mut s = scene();
                if i % 2 == 0 {
                    s.time = "Night".into();
                }
                (i, StructuredCaption { scene: s, objects: vec![object("car", format!("car {i}").as_str())] })
            })
            .collect();
        let mut reversed = caps.clone();
        reversed.reverse();
        let f1 = fuse_captions(&ViewCaptionSet::new(caps).unwrap()).unwrap();
        let f2 = fuse_captions(&ViewCaptionSet::new(reversed).unwrap()).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn identical_views_fuse_to_themselves() {
        let cap = StructuredCaption { scene: scene(), objects: vec![object("car", "x")] };
        let set = ViewCaptionSet::new(vec![(0, cap.clone()), (1, cap.clone()), (2, cap.clone())]).unwrap();
        assert_eq!(fuse_captions(&set).unwrap(), cap);
    }

    #[test]
    fn duplicate_view_ids_rejected() {
        let cap = StructuredCaption { scene: scene(), objects: vec![] };
        assert!(matches!(
            ViewCaptionSet::new(vec![(1, cap.clone()), (1, cap)]),
            Err(CaptionError::DuplicateView(1))
        ));
        assert!(matches!(ViewCaptionSet::new(vec![]), Err(CaptionError::NoViews)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cap = build_structured_caption(scene(), vec![object("car", "red sedan")]).unwrap();
        let json = serde_json::to_string(&cap).unwrap();
        assert!(json.contains("\"scene\""));
        assert!(json.contains("\"objects\""));
        assert!(json.contains("\"bbox\""));
        let back: StructuredCaption = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cap);
    }

    #[test]
    fn embedding_contract() {
        let cap = build_structured_caption(scene(), vec![]).unwrap();
        assert!(caption_embed(&cap, 4).is_err());
        let e1 = caption_embed(&cap, 512).unwrap();
        let e2 = caption_embed(&cap, 512).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let mut other_scene = scene();
        other_scene.weather = "Rain".into();
        let other = build_structured_caption(other_scene, vec![]).unwrap();
        assert_ne!(caption_embed(&other, 512).unwrap(), e1);
    }

    #[test]
    fn sharpness_scorer_orders_flat_below_textured() {
        let flat = vec![0.5; 64];
        let textured: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let s_flat = sharpness_score(&flat, 8, 8).unwrap();
        let s_tex = sharpness_score(&textured, 8, 8).unwrap();
        assert_eq!(s_flat, 0.0);
        assert!(s_tex > s_flat);
        assert!((0.0..=1.0).contains(&s_tex));
        assert!(sharpness_score(&flat, 5, 5).is_err());
    }
}
