//! Randomized monotonicity of the oracle's nodal operator: raising any
//! input of the backward induction (terminal data, running payoff) weakly
//! raises every output value.

use proptest::prelude::*;

use switchvi_core::exprlang::parse;
use switchvi_core::model::{ModeSpace, ProblemParts, ProblemSpec};
use switchvi_core::oracle::{build_tree, switching_game_value, GameConfig, TreeOptions};

fn game(h_bumps: [f64; 4], f_bump: f64) -> ProblemSpec {
    let h = [
        format!("0.1 + {}", h_bumps[0]),
        format!("0.2 + {}", h_bumps[1]),
        format!("0.3*pos(x1) + {}", h_bumps[2]),
        format!("0.15 + {}", h_bumps[3]),
    ];
    let f = [
        format!("x1 + {f_bump}"),
        "0".to_string(),
        "0.2*y_2_2".to_string(),
        "-x1".to_string(),
    ];
    ProblemSpec::new(ProblemParts {
        modes: ModeSpace::new(2, 2).unwrap(),
        dim_k: 1,
        dim_d: 1,
        horizon: 1.0,
        drift: vec![parse("0").unwrap()],
        vol: vec![vec![parse("0.4").unwrap()]],
        gen: f.iter().map(|s| parse(s).unwrap()).collect(),
        cost_lower: vec![
            vec![parse("0").unwrap(), parse("0.25").unwrap()],
            vec![parse("0.25").unwrap(), parse("0").unwrap()],
        ],
        cost_upper: vec![
            vec![parse("0").unwrap(), parse("0.25*sqrt(2)").unwrap()],
            vec![parse("0.25*sqrt(2)").unwrap(), parse("0").unwrap()],
        ],
        terminal: h.iter().map(|s| parse(s).unwrap()).collect(),
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raising_inputs_raises_outputs(
        which in 0usize..4,
        bump in 0.0f64..0.5,
        f_bump in 0.0f64..0.3,
    ) {
        let base = game([0.0; 4], 0.0);
        let tree = build_tree(&base, &[0.2], 4, &TreeOptions::default()).unwrap();
        let v0 = switching_game_value(&tree, &base, &GameConfig::default()).unwrap();

        let mut bumps = [0.0; 4];
        bumps[which] = bump;
        let up = game(bumps, f_bump);
        let v1 = switching_game_value(&tree, &up, &GameConfig::default()).unwrap();
        for pair in 0..4 {
            prop_assert!(
                v1.root[pair] >= v0.root[pair] - 1e-12,
                "pair {pair}: {} < {}",
                v1.root[pair],
                v0.root[pair]
            );
        }
    }
}
