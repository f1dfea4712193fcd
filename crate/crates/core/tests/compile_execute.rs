mod common;

use cgp_nas::catalog::default_catalog;
use cgp_nas::genome::{decode, CgpParams};
use cgp_nas::shapecheck::{trace, TensorShape};
use cgp_nas::trainer::{Mode, Network, Tensor};
use rand::rngs::mock::StepRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn shape_verdicts_agree_with_execution() {
    let catalog = default_catalog();
    let params = CgpParams::standard(0.1, 10);
    let input = TensorShape::spatial(28, 28, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut ok, mut failed) = (0, 0);
    for i in 0..1000 {
        let g = common::raw_random_genome(&params, &catalog, &mut rng);
        let p = decode(&g, &catalog);
        let verdict = trace(&p, &input);
        let built = Network::<f32>::build(&p, input, &mut rng);
        match (&verdict, &built) {
            (Ok(steps), Ok(net)) => {
                ok += 1;
                let shapes: Vec<TensorShape> = steps.iter().map(|s| s.output).collect();
                assert_eq!(shapes, net.layer_shapes(), "genome {i}");
                let out = net
                    .forward(Tensor::zeros(2, input), Mode::Infer, &mut StepRng::new(0, 0))
                    .expect("built network runs");
                assert_eq!(out.probabilities().shape(), steps.last().unwrap().output, "genome {i}");
                assert_eq!(out.probabilities().batch(), 2);
            }
            (Err(a), Err(b)) => {
                failed += 1;
                assert_eq!(a, b, "genome {i}");
            }
            _ => panic!("genome {i}: shapecheck {verdict:?} vs build {:?}", built.as_ref().map(|_| ())),
        }
    }
    // the sample must exercise both verdicts
    assert!(ok > 50 && failed > 50, "ok {ok} failed {failed}");
}
