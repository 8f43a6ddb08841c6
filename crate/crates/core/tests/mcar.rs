use ordmi::dataset::{Column, DataTable};
use ordmi::imputation::mcar_test;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Three correlated columns; `mar` hides x2 whenever x1 is large instead of at random.
fn table(n: usize, mar: bool, rng: &mut ChaCha8Rng) -> DataTable {
    let mut cols = vec![Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let c: f64 = rng.sample(StandardNormal);
        let x = [a, 0.6 * a + 0.8 * b, 0.3 * a + c];
        let hide2 = if mar { x[0] > 0.5 } else { rng.random::<f64>() < 0.3 };
        let hide3 = rng.random::<f64>() < 0.15;
        cols[0].push(Some(x[0]));
        cols[1].push(if hide2 { None } else { Some(x[1]) });
        cols[2].push(if hide3 { None } else { Some(x[2]) });
    }
    DataTable::new(
        cols.into_iter()
            .enumerate()
            .map(|(i, c)| Column::numeric(&format!("x{}", i + 1), c).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn calibrated_under_mcar() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let reps = 300;
    let rejections = (0..reps)
        .filter(|_| mcar_test(&table(400, false, &mut rng), &[]).unwrap().p_value < 0.05)
        .count();
    let rate = rejections as f64 / reps as f64;
    // binomial(300, 0.05) sd is 0.0126
    assert!((0.01..=0.095).contains(&rate), "rejection rate {rate}");
}

#[test]
fn detects_mar() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let r = mcar_test(&table(400, true, &mut rng), &[]).unwrap();
    assert!(r.p_value < 1e-6, "{r:?}");
    assert_eq!(r.patterns, 4);
    // patterns {all}, {x1,x3}, {x1,x2}, {x1}: 3 + 2 + 2 + 1 - 3
    assert_eq!(r.degrees_of_freedom, 5);
}
