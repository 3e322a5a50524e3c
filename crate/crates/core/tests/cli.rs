use std::path::Path;
use std::process::{Command, Output};

fn satgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satgcn"))
        .env("FE_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('=').map(str::to_string))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn one_box_scene_fills_one_pixel_per_pillar() {
    let o = satgcn(&["enhance", "--synth", "--scene", "box", "--dim", "16"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    let pillars = value(&text, "pillars").unwrap();
    assert_eq!(value(&text, "occupied_pixels").unwrap(), pillars);
    assert!(pillars.parse::<usize>().unwrap() > 10);
    for key in ["time_partition_ms", "time_encode_ms", "time_graph_ms", "time_layer2_ms", "time_scatter_ms"] {
        assert!(value(&text, key).is_some(), "missing {key}");
    }
}

#[test]
fn empty_cloud_gives_warning_and_blank_image() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.bin");
    std::fs::write(&input, []).unwrap();
    let pgm = dir.path().join("out.pgm");
    let dump = dir.path().join("out.f32");
    let o = satgcn(&["enhance", "--input", p(&input), "--dim", "8", "--emit-bev", p(&pgm), "--out", p(&dump)]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert!(value(&text, "warning").is_some(), "{text}");
    assert_eq!(value(&text, "occupied_pixels").unwrap(), "0");
    let pgm = std::fs::read(pgm).unwrap();
    let header = b"P5\n440 500\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert!(pgm[header.len()..].iter().all(|&b| b == 0));
    assert_eq!(pgm.len(), header.len() + 440 * 500);
    let dump = std::fs::read(dump).unwrap();
    assert_eq!(dump.len(), 440 * 500 * 8 * 4);
    assert!(dump.iter().all(|&b| b == 0));
}

#[test]
fn out_of_range_points_are_filtered_before_partition() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("behind.bin");
    let mut bytes = Vec::new();
    for v in [-5.0f32, 0.0, -1.0, 0.2, 100.0, 0.0, -1.0, 0.1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&input, bytes).unwrap();
    let o = satgcn(&["enhance", "--input", p(&input), "--dim", "4"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert_eq!(value(&text, "points_in").unwrap(), "2");
    assert_eq!(value(&text, "points_in_range").unwrap(), "0");
}

#[test]
fn truncated_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("short.bin");
    std::fs::write(&input, [0u8; 20]).unwrap();
    let o = satgcn(&["enhance", "--input", p(&input)]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("16"), "{}", stdout(&o));
}

#[test]
fn checkpoint_round_trip_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("stack.satg");
    let (a, b) = (dir.path().join("a.f32"), dir.path().join("b.f32"));
    let base = ["enhance", "--synth", "--scene", "box", "--dim", "8", "--seed", "4"];
    let o = satgcn(&[&base[..], &["--save-ckpt", p(&ckpt), "--out", p(&a)]].concat());
    assert!(o.status.success(), "{}", stdout(&o));
    let o = satgcn(&[&base[..], &["--ckpt", p(&ckpt), "--out", p(&b)]].concat());
    assert!(o.status.success(), "{}", stdout(&o));
    // parameters pass through f32 in the file, so compare loosely
    let read = |path: &Path| -> Vec<f32> {
        std::fs::read(path)
            .unwrap()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let (va, vb) = (read(&a), read(&b));
    assert_eq!(va.len(), vb.len());
    let scale = va.iter().fold(0f32, |m, v| m.max(v.abs())).max(1.0);
    for (x, y) in va.iter().zip(&vb) {
        assert!((x - y).abs() <= 1e-3 * scale, "{x} vs {y}");
    }
}

#[test]
fn checkpoint_with_wrong_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("stack.satg");
    let o = satgcn(&["enhance", "--synth", "--scene", "box", "--dim", "8", "--save-ckpt", p(&ckpt)]);
    assert!(o.status.success());
    let o = satgcn(&["enhance", "--synth", "--scene", "box", "--dim", "16", "--ckpt", p(&ckpt)]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("configuration"), "{}", stdout(&o));
}

#[test]
fn gradcheck_exit_status() {
    let o = satgcn(&["gradcheck", "--seed", "1", "--layers", "3", "--dim", "4", "--k", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(value(&stdout(&o), "worst").is_some());
    let o = satgcn(&["gradcheck", "--seed", "1", "--corrupt"]);
    assert!(!o.status.success());
    for h in ["1e-4", "1e-5"] {
        let o = satgcn(&["gradcheck", "--seed", "2", "--h", h]);
        assert!(o.status.success(), "h={h}: {}", stdout(&o));
    }
}

#[test]
fn synth_then_partition_report() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("frame.bin");
    let boxes = dir.path().join("boxes.json");
    let o = satgcn(&["synth", "--out", p(&bin), "--boxes-out", p(&boxes), "--seed", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = satgcn(&["partition-report", "--input", p(&bin), "--cell", "0.16", "--boxes", p(&boxes)]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    // 6 boxes x 4 cell sizes
    assert_eq!(text.lines().filter(|l| l.starts_with("box=")).count(), 24);
    assert!(text.contains("cell_x=0.08"));

    let o = satgcn(&["partition-report", "--input", p(&bin), "--boxes", p(&dir.path().join("none.json"))]);
    assert!(!o.status.success());
    let o = satgcn(&["partition-report", "--input", p(&bin)]);
    assert!(!o.status.success());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let bin = dir.path().join(format!("{tag}.bin"));
        let pgm = dir.path().join(format!("{tag}.pgm"));
        let o = satgcn(&["synth", "--out", p(&bin), "--seed", "9"]);
        assert!(o.status.success());
        let o = satgcn(&["enhance", "--input", p(&bin), "--ranges", "ped", "--dim", "8", "--seed", "9", "--emit-bev", p(&pgm)]);
        assert!(o.status.success(), "{}", stdout(&o));
        outputs.push((std::fs::read(bin).unwrap(), std::fs::read(pgm).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn bench_reports_every_stage() {
    let o = satgcn(&["bench", "--n", "2000", "--dim", "16", "--runs", "5"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    for key in ["encode_pillars_per_s", "graph_pillars_per_s", "layer0_pillars_per_s", "layer2_pillars_per_s"] {
        assert!(value(&text, key).unwrap().parse::<f64>().unwrap() > 0.0, "{key}");
    }
}
