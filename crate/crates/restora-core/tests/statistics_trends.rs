//! Latent-domain homogenization: across the three degradation families the
//! fitted (alpha, sigma) of AC coefficients shift monotonically with
//! intensity, each family in a consistent direction. Directions were
//! measured once on the pinned corpus: noise raises both (Gaussianization
//! plus dispersion); haze and low light shrink sigma (contrast compression)
//! while alpha drifts slightly down under haze and is exactly
//! scale-invariant under low light.

use restora_core::imgproc::Image;
use restora_core::{corpus, degrade, latent};

fn corpus_stats(imgs: &[Image]) -> (f64, f64) {
    let (mut a, mut s) = (0.0, 0.0);
    for img in imgs {
        let fit = latent::latent_stats(&latent::encode(img), true).unwrap();
        a += fit.params.alpha;
        s += fit.params.sigma;
    }
    (a / imgs.len() as f64, s / imgs.len() as f64)
}

#[test]
fn latent_statistics_shift_monotonically_per_family() {
    let clean = corpus::generate(&corpus::CorpusSpec::large(10, 42)).unwrap();
    let (a_clean, s_clean) = corpus_stats(&clean);

    // Noise: three intensities, alpha and sigma strictly increasing.
    let noisy = |sigma: f64, tag: u64| -> Vec<Image> {
        clean
            .iter()
            .enumerate()
            .map(|(i, img)| {
                degrade::add_gaussian_noise(img, sigma, tag * 100 + i as u64).unwrap()
            })
            .collect()
    };
    let (a_n1, s_n1) = corpus_stats(&noisy(20.0 / 255.0, 1));
    let (a_n2, s_n2) = corpus_stats(&noisy(50.0 / 255.0, 2));
    assert!(
        a_clean < a_n1 && a_n1 < a_n2,
        "noise alpha not increasing: {a_clean} {a_n1} {a_n2}"
    );
    assert!(
        s_clean < s_n1 && s_n1 < s_n2,
        "noise sigma not increasing: {s_clean} {s_n1} {s_n2}"
    );

    // Haze: sigma strictly decreasing, alpha drifting down.
    let hazed = |beta: f64| -> Vec<Image> {
        clean
            .iter()
            .map(|img| degrade::synthesize_haze(img, beta, 1.0).unwrap())
            .collect()
    };
    let (a_h1, s_h1) = corpus_stats(&hazed(0.035));
    let (a_h2, s_h2) = corpus_stats(&hazed(0.075));
    assert!(
        s_clean > s_h1 && s_h1 > s_h2,
        "haze sigma not decreasing: {s_clean} {s_h1} {s_h2}"
    );
    assert!(
        a_clean >= a_h1 && a_h1 >= a_h2,
        "haze alpha not monotone: {a_clean} {a_h1} {a_h2}"
    );

    // Low light: sigma strictly decreasing; alpha is scale-invariant, so it
    // must stay put within the estimator tolerance.
    let dimmed = |gamma: f64| -> Vec<Image> {
        clean
            .iter()
            .map(|img| degrade::synthesize_lowlight(img, gamma).unwrap())
            .collect()
    };
    let (a_l1, s_l1) = corpus_stats(&dimmed(0.7));
    let (a_l2, s_l2) = corpus_stats(&dimmed(0.3));
    assert!(
        s_clean > s_l1 && s_l1 > s_l2,
        "lowlight sigma not decreasing: {s_clean} {s_l1} {s_l2}"
    );
    assert!((a_l1 - a_clean).abs() < 1e-3, "lowlight shifted alpha: {a_l1} vs {a_clean}");
    assert!((a_l2 - a_clean).abs() < 1e-3, "lowlight shifted alpha: {a_l2} vs {a_clean}");
}
