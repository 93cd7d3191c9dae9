//! Prints the pseudo-label and localization metrics the synthetic defaults
//! are tuned against. `cargo run --release --example calibrate [strategy..]`

use std::time::Instant;

use wtal_core::data::{Config, Split, Strategy};
use wtal_core::distill::{pseudo_label_miou, Trainer};
use wtal_core::experiment::train;
use wtal_core::synth::{generate, nearest_prototype_labels, SynthSpec};
use wtal_core::eval::{miou, FramePrediction};
use wtal_core::fuse::fuse_cas;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthSpec::default())?;
    let cfg = Config::default();
    let train_set = ds.split(Split::Train);
    let c = ds.num_classes;

    for (name, cbp_stream) in [("cbp", true), ("vlp", false)] {
        let masks: Vec<Vec<bool>> = train_set
            .iter()
            .map(|v| {
                let (x, p, bg) = if cbp_stream {
                    (&v.cbp.values, &ds.prototypes.cbp_classes, &ds.prototypes.cbp_background)
                } else {
                    (&v.vlp.values, &ds.prototypes.vlp_classes, &ds.prototypes.vlp_background)
                };
                nearest_prototype_labels(x, p, bg).map(|h| h.foreground_mask())
            })
            .collect::<Result<_, _>>()?;
        let items: Vec<_> = train_set
            .iter()
            .zip(&masks)
            .map(|(v, m)| FramePrediction { record: &v.record, foreground: m })
            .collect();
        println!("nearest-prototype {name}: {:?}", miou(&items, c)?);
    }

    let t0 = Instant::now();
    let mut tr = Trainer::new(&ds, &cfg)?;
    tr.warmup(cfg.warmup_iters)?;
    let vanilla = pseudo_label_miou(&train_set, c, &cfg, |v| tr.vlp.predict(&v.vlp.values))?;
    println!("warmup cbp   {:?}  ({:.1?})", tr.history[0], t0.elapsed());
    println!("vanilla vlp  {vanilla:?}");
    for _ in 0..cfg.cycles {
        tr.cycle()?;
        for r in &tr.history[tr.history.len() - 2..] {
            println!("{:?}", r);
        }
    }
    let fused = pseudo_label_miou(&train_set, c, &cfg, |v| {
        fuse_cas(&tr.cbp.predict(&v.cbp.values)?, &tr.vlp.predict(&v.vlp.values)?, cfg.fusion, cfg.fuse_weight)
    })?;
    println!("fused final  {fused:?}  ({:.1?})", t0.elapsed());

    let wanted: Vec<String> = std::env::args().skip(1).collect();
    for s in Strategy::ALL {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == s.name()) {
            continue;
        }
        let t = Instant::now();
        let cfg = Config { strategy: s, ..cfg.clone() };
        let m = train(&ds, &cfg)?;
        let r = m.evaluate(&ds, Split::Test, &cfg)?;
        println!(
            "{:12} {}  per-iou {:?} ({:.1?})",
            s.name(),
            wtal_core::eval::summary_line(&r),
            r.per_iou.iter().map(|p| (p.1 * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t.elapsed()
        );
    }
    Ok(())
}
