// Rough throughput probe for the online loop at VGA resolution.
use std::time::Instant;

use gsfusion_core::dataset::synthetic::presets;
use gsfusion_core::pipeline::{run_frames, PipelineConfig};

fn main() {
    let spec = presets::desk_scene(640, 480);
    let t0 = Instant::now();
    let frames = spec.render_sequence(6).unwrap();
    println!("synth gen: {:.2?}", t0.elapsed());

    let config = PipelineConfig::default();
    let t0 = Instant::now();
    let out = run_frames(config, spec.intrinsics, &frames).unwrap();
    println!("pipeline: {:.2?} total", t0.elapsed());
    for f in &out.stats.frames {
        println!(
            "frame {}: fuse {:.0}ms seg {:.0}ms init {:.0}ms opt {:.0}ms total {:.0}ms | leaves {} new {} gauss {} blocks {}",
            f.index, f.fuse_ms, f.segment_ms, f.init_ms, f.optimize_ms, f.total_ms,
            f.leaf_count, f.new_gaussians, f.gaussian_count, f.block_count
        );
    }
    println!(
        "fps excl io: {:.2}  incl io: {:.2}  gaussians {}  keyframes {}",
        out.stats.summary.fps_excl_io,
        out.stats.summary.fps_incl_io,
        out.stats.summary.gaussian_count,
        out.stats.summary.keyframe_count,
    );
}
