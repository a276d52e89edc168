//! Non-maximum suppression and precision / recall / mAP on a tiny hand-made corpus.
//!
//! `cargo run --release --example nms_and_map`

use cployo::metrics::evaluate;
use cployo::neckhead::{nms, Detection, GtBox, NmsConfig};

fn det(b: [f64; 4], score: f64) -> Detection {
    Detection { bbox: b, score, class_id: 0 }
}

fn gt(b: [f64; 4]) -> GtBox {
    GtBox { bbox: b, class_id: 0 }
}

fn main() {
    let raw = vec![
        det([10.0, 10.0, 30.0, 30.0], 0.92),
        det([11.0, 9.0, 31.0, 29.0], 0.85),
        det([12.0, 12.0, 33.0, 31.0], 0.40),
        det([40.0, 40.0, 52.0, 50.0], 0.77),
        det([41.0, 41.0, 51.0, 52.0], 0.20),
        det([0.0, 50.0, 8.0, 60.0], 0.55),
    ];
    let kept = nms(&raw, &NmsConfig::default());
    println!("NMS kept {} of {}:", kept.len(), raw.len());
    for d in &kept {
        println!("  {:?} score {:.2}", d.bbox, d.score);
    }

    let images = vec![kept, vec![det([5.0, 5.0, 20.0, 20.0], 0.6), det([30.0, 30.0, 40.0, 44.0], 0.3)]];
    let truth = vec![
        vec![gt([10.0, 10.0, 30.0, 30.0]), gt([40.0, 40.0, 51.0, 51.0])],
        vec![gt([6.0, 5.0, 20.0, 21.0]), gt([50.0, 50.0, 60.0, 60.0])],
    ];
    let r = evaluate(&images, &truth, 0.25);
    println!("\nprecision {:.3}  recall {:.3}  mAP50 {:.3}  mAP50-95 {:.3}", r.precision, r.recall, r.map50, r.map50_95);
    for (t, ap) in &r.ap_per_iou {
        println!("  AP@{t:.2} {ap:.3}");
    }
}
