use pie_core::metrics::{train_classifier, ClassifierTrainConfig};
use pie_core::mlp::MlpDenoiser;
use pie_core::synth::{make_dataset, BlobImageSpec, DISEASE, HEALTHY};
use pie_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec16() -> BlobImageSpec {
    BlobImageSpec { grid: 16, background: 0.15, gradient_amplitude: 0.1, center: (8.0, 8.0), r_max: 5.5, peak: 0.7, noise_std: 0.01 }
}

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let model = MlpDenoiser::load(std::path::Path::new(&path)).unwrap();
    let s = NoiseSchedule::cosine(50, 0.9999, 0.0047).unwrap();
    let spec = spec16();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sev = [0.0, 0.05, 0.1, 0.9, 0.95, 1.0];
    let dataset = make_dataset(&spec, 200, &sev, &mut rng).unwrap();
    let items: Vec<(State, Condition)> = dataset.iter().map(|b| (b.state.clone(), b.class)).collect();
    let report = train_classifier(&items, DISEASE, &ClassifierTrainConfig::default()).unwrap();
    println!("classifier holdout acc: {:.3}", report.holdout_accuracy);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (label, y) in [("disease", DISEASE), ("healthy", HEALTHY)] {
        let mut mean_conf = 0.0;
        let n = 24;
        for i in 0..n {
            let x = ddim::sample_clipped(&model, y, &s, (0.0, 1.0), &mut rng).unwrap();
            let p = report.model.confidence(&x);
            mean_conf += if y == DISEASE { p } else { 1.0 - p };
            if i == 0 {
                let v = x.values();
                let center: f64 = (6..10).flat_map(|r| (6..10).map(move |c| (r, c))).map(|(r, c)| v[r * 16 + c]).sum::<f64>() / 16.0;
                let corner: f64 = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| v[r * 16 + c]).sum::<f64>() / 9.0;
                println!("  {label} sample[0]: center {center:.3} corner {corner:.3}");
            }
        }
        println!("{label}-conditioned: mean target conf {:.3}", mean_conf / n as f64);
    }
}
