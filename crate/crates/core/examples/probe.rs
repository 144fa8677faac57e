//! Diagnostic probe: where does the trained model attend, and do the
//! predicted tracklets land on the target? Not part of the test suite.

use std::env;
use std::path::Path;

use reasonseg::checkpoint::load_checkpoint;
use reasonseg::config::RunConfig;
use reasonseg::context::condense_top_k;
use reasonseg::context::CondenseStrategy;
use reasonseg::mask::{st_iou, Mask};
use reasonseg::train::load_split_episodes;

fn mass_inside(attn_row: &[f64], mask: &Mask, grid: usize, patch: usize) -> f64 {
    let mut inside = 0.0;
    for (cell, w) in attn_row.iter().enumerate() {
        let gy = cell / grid;
        let gx = cell % grid;
        let mut hit = 0usize;
        for dy in 0..patch {
            for dx in 0..patch {
                if mask.get(gy * patch + dy, gx * patch + dx) {
                    hit += 1;
                }
            }
        }
        inside += w * hit as f64 / (patch * patch) as f64;
    }
    inside
}

fn main() {
    let args: Vec<String> = env::args().collect();
    let ckpt = Path::new(&args[1]);
    let data = Path::new(&args[2]);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let mut cfg = RunConfig::default();
    if let Some(p) = args.get(4) {
        cfg = reasonseg::config::load_config(Path::new(p)).unwrap();
    }
    let (model, _, iter) = load_checkpoint(ckpt, &cfg).unwrap();
    println!("checkpoint at iter {iter}");
    let eps = load_split_episodes(data, "val").unwrap();
    let patch = cfg.encoder.patch;
    let grid = cfg.generator.canvas_h / patch;

    for ep in eps.iter().take(n) {
        let target = ep.target_ids[0];
        let info = &ep.instances[target];
        println!(
            "\n== {} | q=\"{}\" | target {} {} ({} inst)",
            ep.id,
            ep.query,
            info.color.word(),
            info.kind.word(),
            ep.instances.len()
        );
        let out = model.infer(&ep.clip, &ep.query).unwrap();
        println!("   answer: {}", out.answer.join(" "));
        let gt = &ep.tracklets[target];
        let mut best = (0usize, 0.0f64);
        for (i, tr) in out.decoded.tracklets.iter().enumerate() {
            let iou = st_iou(&tr.frames, gt);
            if iou > best.1 {
                best = (i, iou);
            }
            print!("   tok{i}: conf {:.3} iou {:.3} |", tr.confidence, iou);
            eprintln!("PRED {} {} {}", ep.id, tr.confidence, iou);
        }
        println!();
        let by_conf = out
            .decoded
            .tracklets
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.confidence.partial_cmp(&b.1.confidence).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        println!(
            "   best-iou tok{} ({:.3}), top-conf tok{} -> {}",
            best.0,
            best.1,
            by_conf,
            if by_conf == best.0 { "MATCH" } else { "MISS" }
        );

        // CAM attention geometry on two frames.
        let (feats, _) = model.encoder.encode_frames(&ep.clip).unwrap();
        let ids = model
            .responder
            .vocab
            .encode_fixed(&ep.query, cfg.cam.query_len)
            .unwrap();
        let rows = model.responder.embed_symbols(&ids);
        let (x_txt, _) = model.txt_proj.forward(&rows).unwrap();
        for &t in &[0usize, 4] {
            let (cam, _) = model.cam.aggregate_context(&x_txt, feats.finest(t)).unwrap();
            let resp = match cfg.cam.strategy {
                CondenseStrategy::AttnMax => &cam.attn,
                CondenseStrategy::LogitMax => &cam.logits,
            };
            let cond = condense_top_k(&cam.enriched, resp, cfg.cam.keep).unwrap();
            let mut stats = String::new();
            for r in 0..cam.attn.nrows() {
                let row: Vec<f64> = cam.attn.row(r).to_vec();
                let maxw = row.iter().cloned().fold(0.0, f64::max);
                let on_t = mass_inside(&row, &ep.tracklets[target][t], grid, patch);
                let mut on_other = 0.0;
                for (j, tr) in ep.tracklets.iter().enumerate() {
                    if j != target {
                        on_other += mass_inside(&row, &tr[t], grid, patch);
                    }
                }
                stats.push_str(&format!(" w{r}:mx{maxw:.2}/t{on_t:.2}/o{on_other:.2}"));
            }
            println!("   f{t} kept{:?}{stats}", cond.source_indices);
        }
    }
}
