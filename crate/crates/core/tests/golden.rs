//! Recorded sequential outputs for every instance. Set `LMOE_BLESS=1` to
//! regenerate the files under `tests/golden/`.

use std::path::PathBuf;

use linear_moe::lsm::{lsm_forward_chunked, lsm_forward_sequential, Instance, LsmInputs, LsmSpec};
use linear_moe::{Rng, Tensor};
use serde::{Deserialize, Serialize};

const SEED: u64 = 2024;
const N: usize = 32;
const D: usize = 8;

#[derive(Serialize, Deserialize)]
struct Golden {
    instance: String,
    seed: u64,
    n: usize,
    d_k: usize,
    d_v: usize,
    rng: String,
    spec: LsmSpec,
    output: Vec<Vec<f64>>,
}

fn path(inst: Instance) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{}_seed{SEED}.json", inst.name()))
}

fn compute(inst: Instance) -> (LsmSpec, LsmInputs, Tensor) {
    let spec = LsmSpec::new(inst, D, D);
    let x = LsmInputs::random(&spec, N, &mut Rng::seed(SEED));
    let out = lsm_forward_sequential(&x, &spec).unwrap();
    (spec, x, out)
}

#[test]
fn outputs_match_recorded_goldens() {
    let bless = std::env::var("LMOE_BLESS").is_ok_and(|v| v == "1");
    for inst in Instance::ALL {
        let (spec, x, out) = compute(inst);
        let p = path(inst);
        if bless {
            let g = Golden {
                instance: inst.name().into(),
                seed: SEED,
                n: N,
                d_k: D,
                d_v: D,
                rng: Rng::ALGORITHM.into(),
                spec: spec.clone(),
                output: (0..N).map(|i| out.row_slice(i).to_vec()).collect(),
            };
            std::fs::write(&p, serde_json::to_string_pretty(&g).unwrap()).unwrap();
            continue;
        }
        let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let g: Golden = serde_json::from_str(&text).unwrap();
        assert_eq!(g.spec, spec, "{inst}");
        let rows: Vec<&[f64]> = g.output.iter().map(Vec::as_slice).collect();
        let want = Tensor::from_rows(&rows).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12, "{inst}: sequential drifted from golden");
        let chunked = lsm_forward_chunked(&x, &spec, 8).unwrap();
        assert!(chunked.max_abs_diff(&want).unwrap() < 1e-10, "{inst}: chunked differs from golden");
    }
}
