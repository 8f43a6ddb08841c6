//! Synthetic survey shaped like a lifestyle questionnaire: Likert items,
//! two categorical items, height/weight/age, and a 1..5 response stored
//! reverse-coded.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ordmi::dataset::{Column, ColumnKind, ColumnSpec, DataTable, Schema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const RESPONSE: &str = "Procrastination";
pub const SMOKING: [&str; 3] = ["never smoked", "tried smoking", "current smoker"];
pub const PLACE: [&str; 2] = ["village", "city"];

pub struct Survey {
    pub n: usize,
    pub seed: u64,
    /// Per-cell deletion probability for every column except the response.
    pub missing_rate: f64,
    pub missing_responses: usize,
}

impl Default for Survey {
    fn default() -> Self {
        Self {
            n: 600,
            seed: 1,
            missing_rate: 0.03,
            missing_responses: 6,
        }
    }
}

fn likert(z: f64) -> i64 {
    (3.0 + 1.1 * z).round().clamp(1.0, 5.0) as i64
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn schema() -> Schema {
    let l = || ColumnKind::ordinal_range(1, 5);
    Schema::new(vec![
        ColumnSpec::new(RESPONSE, l()),
        ColumnSpec::new("Hiphop, Rap", l()),
        ColumnSpec::new("Opera", l()),
        ColumnSpec::new("Healthy eating", l()),
        ColumnSpec::new("Smoking", ColumnKind::nominal(SMOKING.to_vec(), "never smoked")),
        ColumnSpec::new("Village - town", ColumnKind::nominal(PLACE.to_vec(), "village")),
        ColumnSpec::new("Height", ColumnKind::Numeric),
        ColumnSpec::new("Weight", ColumnKind::Numeric),
        ColumnSpec::new("Age", ColumnKind::Numeric),
    ])
}

impl Survey {
    pub fn table(&self) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.n;
        let mut resp = Vec::with_capacity(n);
        let (mut hip, mut opera, mut healthy) = (Vec::new(), Vec::new(), Vec::new());
        let (mut smoke, mut place) = (Vec::new(), Vec::new());
        let (mut height, mut weight, mut age) = (Vec::new(), Vec::new(), Vec::new());
        let cutpoints = [-4.5, -3.2, -1.7, -0.4];
        for _ in 0..n {
            let mut z = || rng.sample::<f64, _>(StandardNormal);
            let (a, b, c, d, e) = (z(), z(), z(), z(), z());
            let h = likert(a);
            let o = likert(0.3 * a + 0.95 * b);
            let he = likert(c);
            let s = if d > 0.9 { 2 } else if d > 0.0 { 1 } else { 0 };
            let p = usize::from(e > -0.3);
            let ht = 172.0 + 9.0 * z();
            let wt = 68.0 + (ht - 172.0) + 6.0 * z();
            let ag = 20.0 + 2.5 * z();
            let eta = -0.35 * h as f64 - 0.25 * o as f64 - 0.3 * he as f64
                + [0.0, 0.6, 0.3][s]
                - 0.4 * p as f64;
            let u: f64 = rng.random();
            let y = cutpoints.iter().take_while(|&&cut| u > logistic(cut - eta)).count() as i64 + 1;
            // stored reverse-coded, as in a "do you put things off" item
            resp.push(Some(6 - y));
            hip.push(Some(h));
            opera.push(Some(o));
            healthy.push(Some(he));
            smoke.push(Some(SMOKING[s]));
            place.push(Some(PLACE[p]));
            height.push(Some(ht.round()));
            weight.push(Some(wt.round()));
            age.push(Some(ag.round()));
        }
        let mut hide = |v: &mut dyn FnMut(usize)| {
            for i in 0..n {
                if rng.random::<f64>() < self.missing_rate {
                    v(i);
                }
            }
        };
        hide(&mut |i| hip[i] = None);
        hide(&mut |i| opera[i] = None);
        hide(&mut |i| healthy[i] = None);
        hide(&mut |i| smoke[i] = None);
        hide(&mut |i| place[i] = None);
        hide(&mut |i| height[i] = None);
        hide(&mut |i| weight[i] = None);
        hide(&mut |i| age[i] = None);
        for i in 0..self.missing_responses.min(n) {
            resp[(i * 7919) % n] = None;
        }
        let lv = || vec![1, 2, 3, 4, 5];
        DataTable::new(vec![
            Column::ordinal(RESPONSE, lv(), resp).unwrap(),
            Column::ordinal("Hiphop, Rap", lv(), hip).unwrap(),
            Column::ordinal("Opera", lv(), opera).unwrap(),
            Column::ordinal("Healthy eating", lv(), healthy).unwrap(),
            Column::nominal("Smoking", SMOKING.to_vec(), "never smoked", smoke).unwrap(),
            Column::nominal("Village - town", PLACE.to_vec(), "village", place).unwrap(),
            Column::numeric("Height", height).unwrap(),
            Column::numeric("Weight", weight).unwrap(),
            Column::numeric("Age", age).unwrap(),
        ])
        .unwrap()
    }

    /// Writes `survey.csv` and `pipeline.json` into `dir`; returns the config path.
    pub fn write(&self, dir: &Path, extra: &str) -> PathBuf {
        self.table().save_csv(&dir.join("survey.csv")).unwrap();
        let schema = serde_json::to_string(&schema()).unwrap();
        let cfg = format!(
            r#"{{
  "data_path": "survey.csv",
  "schema": {schema},
  "response": "{RESPONSE}",
  "reverse_code_response": true,
  "derived": [{{"type": "bmi", "name": "BMI", "weight": "Weight", "height": "Height"}}],
  "predictors": ["Hiphop, Rap", "Opera", "Healthy eating", "Smoking", "Village - town", "BMI", "Age"],
  "m": 5,
  "seed": 42{extra}
}}"#
        );
        let path = dir.join("pipeline.json");
        std::fs::write(&path, cfg).unwrap();
        path
    }
}
