use selcal::neural::{train, MlpSpec, Targets};

fn spec() -> MlpSpec {
    MlpSpec {
        hidden: vec![8],
        learning_rate: 0.5,
        epochs: 2000,
        batch_size: 4,
        seed: 4,
        ..MlpSpec::regression()
    }
}

#[test]
fn learns_and() {
    let x = vec![
        vec![0.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
    ];
    let y = [0.0, 0.0, 0.0, 1.0];
    let (net, _) = train(&x, Targets::Values(&y), &spec()).unwrap();
    let mse = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| (net.forward(xi).unwrap()[0] - yi).powi(2))
        .sum::<f64>()
        / 4.0;
    assert!(mse < 0.05, "mse {mse}");
}

#[test]
fn constant_target_is_matched() {
    let x: Vec<Vec<f64>> = (0..32)
        .map(|i| vec![i as f64 / 32.0, (i % 5) as f64 / 5.0])
        .collect();
    let y = vec![0.7; 32];
    let s = MlpSpec {
        batch_size: 8,
        epochs: 300,
        learning_rate: 0.1,
        ..spec()
    };
    let (net, _) = train(&x, Targets::Values(&y), &s).unwrap();
    let mean = x.iter().map(|xi| net.forward(xi).unwrap()[0]).sum::<f64>() / x.len() as f64;
    assert!((mean - 0.7).abs() < 0.02, "mean output {mean}");
}
