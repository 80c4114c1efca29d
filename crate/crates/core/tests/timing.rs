//! Wall-clock comparison of the two sketching range finders. Kept in its own
//! test binary so no other test shares the CPU while it measures.

use std::time::{Duration, Instant};

use loract::decompose::{rsvd, sampled_ortho};
use loract::linalg::{gaussian_matrix, SeededRng};

/// The sampled sketch skips the Gaussian draw, so on a square matrix it
/// should not be slower than the Gaussian range finder.
#[test]
fn sampled_is_not_slower_than_rsvd() {
    let a = gaussian_matrix(&mut SeededRng::new(1), 1024, 1024);
    let (k, t) = (32, 1);
    let time = |f: &dyn Fn()| {
        let s = Instant::now();
        f();
        s.elapsed()
    };
    let mut sampled: Vec<Duration> = Vec::new();
    let mut gaussian: Vec<Duration> = Vec::new();
    for i in 0..9 {
        sampled.push(time(&|| {
            sampled_ortho(&a, k, k, t, &mut SeededRng::new(i)).unwrap();
        }));
        gaussian.push(time(&|| {
            rsvd(&a, k, k, t, &mut SeededRng::new(i)).unwrap();
        }));
    }
    sampled.sort();
    gaussian.sort();
    let (s, g) = (sampled[4], gaussian[4]);
    println!("median of 9 on 1024x1024, k={k}, t={t}: sampled {s:?}, rsvd {g:?}");
    assert!(s <= g, "sampled {s:?} vs rsvd {g:?}");
}
