//! Seeded fixtures shared by the benchmarks.

use icd_core::domain::{Annotation, AnnotationSource, Demonstration, Pool, Sample};
use icd_core::{QueryFeatures, TokenDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Pool of `n` entries with uniform random embeddings.
pub fn random_pool(n: usize, dim: usize, seed: u64) -> Pool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Pool::new(dim, "bench");
    for i in 0..n {
        let d = Demonstration::new(
            Sample::new(format!("p{i}"), format!("img{i}"), "q"),
            Annotation::new("a", AnnotationSource::Oracle),
            random_vec(&mut rng, dim),
            random_vec(&mut rng, dim),
        )
        .expect("valid demonstration");
        pool.push(d).expect("matching dimension");
    }
    pool
}

pub fn random_query(dim: usize, seed: u64) -> QueryFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QueryFeatures::new(random_vec(&mut rng, dim), random_vec(&mut rng, dim))
}

/// `steps` truncated top-`k` distributions, as an API with `top_logprobs = k` returns.
pub fn random_sequence(steps: usize, k: usize, seed: u64) -> Vec<TokenDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum::<f64>() * 1.25;
            let lp = raw.iter().enumerate().map(|(i, p)| (format!("t{i}"), (p / total).ln()));
            TokenDistribution::from_logprobs(lp, true).expect("valid distribution")
        })
        .collect()
}
