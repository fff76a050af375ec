//! Weighted reservoir retention rates against the exact inclusion probabilities.

use deeprank::sampler::ReservoirBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 100_000;

    // Capacity 1, weights 1 and 3: the second item survives with probability 3/4.
    let mut second = 0;
    for _ in 0..trials {
        let mut buf = ReservoirBuffer::new(0, 1);
        buf.offer(0, 1.0, rng.random());
        buf.offer(1, 3.0, rng.random());
        second += buf.contains(1) as u32;
    }
    println!("capacity 1, weights [1, 3]: P(keep second) = {:.4} (exact 0.75)", second as f64 / trials as f64);

    // Capacity 2 over five weighted items.
    let weights = [1.0, 2.0, 3.0, 4.0, 5.0];
    let mut kept = [0u32; 5];
    for _ in 0..trials {
        let mut buf = ReservoirBuffer::new(0, 2);
        for (id, &w) in weights.iter().enumerate() {
            buf.offer(id as u32, w, rng.random());
        }
        for e in buf.entries() {
            kept[e.id as usize] += 1;
        }
    }
    for (w, k) in weights.iter().zip(kept) {
        println!("capacity 2, weight {w}: inclusion {:.4}", k as f64 / trials as f64);
    }
}
