use std::fmt::Write as _;

use super::metrics::{map_suite, mean_euclidean, point_distance, ClassAp, EvalRecord};
use crate::error::Result;
use crate::geometry::LandmarkClass;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDistance {
    pub image_id: String,
    pub class: LandmarkClass,
    pub distance: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub per_class: Vec<ClassAp>,
    pub mean_distance: Vec<(LandmarkClass, f64)>,
    pub per_image: Vec<ImageDistance>,
    pub excluded: Vec<LandmarkClass>,
}

impl MetricReport {
    /// Records are processed in image-id order so the report does not depend
    /// on how they were gathered.
    pub fn compute(records: &[EvalRecord]) -> Result<Self> {
        let mut sorted = records.to_vec();
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let suite = map_suite(&sorted)?;
        let mut mean_distance = Vec::new();
        let mut per_image = Vec::new();
        for class in LandmarkClass::ALL {
            if sorted.iter().all(|r| r.gt.point(class).is_none()) {
                continue;
            }
            mean_distance.push((class, mean_euclidean(&sorted, class)?));
            for r in &sorted {
                if let Some(distance) = point_distance(r, class)? {
                    let fallback = r.point(class).is_some_and(|p| p.fallback);
                    per_image.push(ImageDistance { image_id: r.image_id.clone(), class, distance, fallback });
                }
            }
        }
        Ok(MetricReport {
            map_50_95: suite.map_50_95,
            map_50: suite.map_50,
            map_75: suite.map_75,
            per_class: suite.per_class,
            mean_distance,
            per_image,
            excluded: suite.excluded,
        })
    }

    pub fn distance(&self, class: LandmarkClass) -> Option<f64> {
        self.mean_distance.iter().find(|(c, _)| *c == class).map(|(_, d)| *d)
    }

    pub fn fallback_count(&self, class: LandmarkClass) -> usize {
        self.per_image.iter().filter(|d| d.class == class && d.fallback).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP50:95  {:.4}", self.map_50_95);
        let _ = writeln!(s, "mAP50     {:.4}", self.map_50);
        let _ = writeln!(s, "mAP75     {:.4}", self.map_75);
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "AP {:<11} 50:95 {:.4}  50 {:.4}  75 {:.4}  (n={})",
                c.class.name(),
                c.ap50_95(),
                c.ap50(),
                c.ap75(),
                c.gt_count
            );
        }
        for (class, d) in &self.mean_distance {
            let _ = writeln!(s, "mean distance {:<11} {:.3} px  (fallbacks {})", class.name(), d, self.fallback_count(*class));
        }
        for c in &self.excluded {
            let _ = writeln!(s, "excluded {} (no ground truth)", c.name());
        }
        s
    }

    /// `metric,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        let _ = writeln!(s, "map,50:95,{:.6}", self.map_50_95);
        let _ = writeln!(s, "map,50,{:.6}", self.map_50);
        let _ = writeln!(s, "map,75,{:.6}", self.map_75);
        for c in &self.per_class {
            let _ = writeln!(s, "ap50:95,{},{:.6}", c.class.name(), c.ap50_95());
            let _ = writeln!(s, "ap50,{},{:.6}", c.class.name(), c.ap50());
            let _ = writeln!(s, "ap75,{},{:.6}", c.class.name(), c.ap75());
        }
        for (class, d) in &self.mean_distance {
            let _ = writeln!(s, "mean_distance,{},{:.6}", class.name(), d);
            let _ = writeln!(s, "fallbacks,{},{}", class.name(), self.fallback_count(*class));
        }
        for d in &self.per_image {
            let _ = writeln!(s, "distance,{}:{},{:.6}", d.image_id, d.class.name(), d.distance);
        }
        s
    }
}
