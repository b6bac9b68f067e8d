use morphmesh::actuation::{evolve, GaConfig};
use morphmesh::mesh::analyze_constraints;
use morphmesh::scenario::Scenario;

#[test]
#[ignore]
fn ga_probe_8x8() {
    let scenario = Scenario::load("8x8_ideal").unwrap();
    let m = scenario.materialize().unwrap();
    let system = analyze_constraints(&m.topology, &m.initial, None);
    println!("dof {}", system.dof);
    for (stall, max_gen) in [(50usize, 200usize), (200, 1000)] {
        let config = GaConfig {
            fitness_threshold: 1e-60,
            stall_generations: stall,
            max_generations: max_gen,
            ..GaConfig::default()
        };
        let t0 = std::time::Instant::now();
        match evolve(&system.null_relative, &config) {
            Ok(pop) => println!(
                "stall {stall} max {max_gen}: best {:.3e} single-axis {} wall {:.1}s",
                pop[0].fitness,
                pop[0].single_axis_per_joint(),
                t0.elapsed().as_secs_f64()
            ),
            Err(e) => println!("stall {stall} max {max_gen}: ERR {e} wall {:.1}s", t0.elapsed().as_secs_f64()),
        }
    }
}
