use dyngate::driftlab::*;
use dyngate::gatenet::*;
use dyngate::adapt::*;
fn main() {
    let ds = gen_synthetic(10, 784, 200, 12345);
    let parts = split_dataset(&ds, 0);
    let tr = ds.select(&parts.pretrain, "tr");
    let de = ds.select(&parts.drift_eval, "de");
    let st = ds.select(&parts.stream, "st");
    let drift = DriftSpec { kind: DriftKind::PixelPermutation, severity: 0.8, seed: 9 };
    let dde = apply_drift(&de, &drift);
    let dst = apply_drift(&st, &drift);
    let spec = GateSpec::dg_soft(0.2).unwrap();
    let init = ModelParams::init(Arch::mlp(784, 256, 10), &spec, 7).unwrap();
    let model = pretrain(&init, &spec, &tr, 4, 0.01, 1e-3, 3).unwrap();
    println!("drift_before = {:.1}", evaluate(&model, &spec, &dde).unwrap().accuracy);
    for (eta, steps) in [(0.01, 1000), (0.05, 1000), (0.2, 1000), (0.05, 5000), (0.2, 5000)] {
        let stream: Vec<(Vec<f64>, usize)> = (0..steps)
            .map(|t| (dst.inputs[t % dst.len()].clone(), dst.labels[t % dst.len()]))
            .collect();
        let cfg = AdaptConfig { eta, ..AdaptConfig::default() };
        let run = run_stream(&stream, &model, AdaptationMode::BThetaOnly, &cfg, &spec, None).unwrap();
        let acc = evaluate(&run.final_params, &run.final_spec, &dde).unwrap().accuracy;
        println!("B eta={eta} steps={steps}: adapt={acc:.1}");
    }
}
