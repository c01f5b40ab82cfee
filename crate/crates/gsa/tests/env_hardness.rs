//! Exploration-hardness calibration and datastore stress checks.

use gsa::datastore::{load_store, RecordMeta, StoreFileWriter, StoreHeader};
use gsa::envs::{Embodiment, ObsMode, Task, ToyEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn corridor_defeats_uniform_random_actions() {
    // 10^4 episodes of uniform random actions: zero sparse successes, so
    // the headline task genuinely requires directed exploration.
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut env = ToyEnv::new(Embodiment::VelocityPoint, Task::Corridor, ObsMode::Vector);
    let mut successes = 0usize;
    for ep in 0..10_000u64 {
        env.reset(ep);
        for _ in 0..env.episode_len {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (_, reward, done) = env.step(&a);
            if reward >= 1.0 {
                successes += 1;
                break;
            }
            if done {
                break;
            }
        }
    }
    assert_eq!(successes, 0, "random policy reached the corridor goal");
}

#[test]
fn sixty_thousand_record_store_loads_lazily() {
    // Opening a large store must only touch record headers; payloads stay
    // on disk until fetched.
    let dir = std::env::temp_dir().join(format!("gsa_stress_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("stress.gsa1");
    let header = StoreHeader {
        obs_mode: 0,
        obs_shape: vec![4],
        action_dim: 3,
    };
    let mut writer = StoreFileWriter::create(&path, header).unwrap();
    let t = 5;
    for i in 0..60_000u64 {
        let obs: Vec<f32> = (0..(t + 1) * 4).map(|j| ((i as usize + j) % 17) as f32).collect();
        let actions = vec![0.25f32; t * 3];
        writer
            .append(
                (i % 3) as u16,
                obs,
                actions,
                None,
                RecordMeta {
                    source: "stress".into(),
                    sigma: 0.0,
                },
            )
            .unwrap();
    }
    writer.finish().unwrap();
    let file_size = std::fs::metadata(&path).unwrap().len();

    let store = load_store(&path).unwrap();
    assert_eq!(store.len(), 60_000);
    let after_open = store.bytes_read();
    assert!(
        after_open < file_size / 5,
        "opening read {after_open} of {file_size} bytes; loading must not materialize payloads"
    );

    // Random access works and reads stay proportional to what is fetched.
    let rec = store.record(59_999).unwrap();
    assert_eq!(rec.len(), t);
    let rec2 = store.record(7).unwrap();
    assert_eq!(rec2.trajectory_id, 7);
    let after_reads = store.bytes_read();
    assert!(after_reads < file_size / 5);

    std::fs::remove_file(&path).unwrap();
}
