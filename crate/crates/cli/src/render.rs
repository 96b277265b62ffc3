//! Static SVG Gantt rendering of a simulated trace: one horizontal lane per
//! rank with a compute row and a communication row, blocks classed by operator
//! kind, microbatch labels on compute blocks. Output is deterministic for
//! golden-file comparisons.

use nestpipe_core::textio::TraceFile;

const LANE_HEIGHT: f64 = 44.0;
const COMPUTE_ROW: f64 = 26.0;
const COMM_ROW: f64 = 12.0;
const LEFT_MARGIN: f64 = 64.0;
const TOP_MARGIN: f64 = 20.0;
const PLOT_WIDTH: f64 = 1200.0;

fn color_of(kind: &str) -> &'static str {
    match kind {
        "enc_fwd" => "#4e9a06",
        "enc_bwd" => "#8ae234",
        "llm_fwd" => "#3465a4",
        "llm_bwd" => "#729fcf",
        "gen_fwd" => "#a40000",
        "gen_bwd" => "#ef2929",
        "send" => "#888a85",
        "recv" => "#babdb6",
        "gather" => "#c4a000",
        "scatter" => "#edd400",
        "cp_convert" => "#75507b",
        "fsdp_sync" => "#2e3436",
        "fsdp_pull" => "#555753",
        _ => "#000000",
    }
}

pub fn render_svg(trace: &TraceFile) -> String {
    let span = if trace.iteration_time > 0.0 {
        trace.iteration_time
    } else {
        1.0
    };
    let scale = PLOT_WIDTH / span;
    let height = TOP_MARGIN + trace.ranks as f64 * LANE_HEIGHT + 30.0;
    let width = LEFT_MARGIN + PLOT_WIDTH + 20.0;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    out.push_str("<style>text{font-family:monospace;font-size:9px}</style>\n");

    for rank in 0..trace.ranks {
        let y = TOP_MARGIN + rank as f64 * LANE_HEIGHT;
        out.push_str(&format!(
            "<g class=\"lane\" data-rank=\"{rank}\">\n<text x=\"4\" y=\"{:.1}\">rank {rank}</text>\n",
            y + COMPUTE_ROW * 0.7
        ));
        out.push_str(&format!(
            "<line x1=\"{LEFT_MARGIN:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#d3d7cf\"/>\n",
            y + COMPUTE_ROW + COMM_ROW + 2.0,
            LEFT_MARGIN + PLOT_WIDTH,
            y + COMPUTE_ROW + COMM_ROW + 2.0
        ));
        for ev in trace.events.iter().filter(|e| e.rank == rank) {
            let x = LEFT_MARGIN + ev.start * scale;
            let w = ((ev.end - ev.start) * scale).max(0.5);
            let (row_y, row_h) = if ev.comm {
                (y + COMPUTE_ROW + 1.0, COMM_ROW)
            } else {
                (y, COMPUTE_ROW)
            };
            out.push_str(&format!(
                "<rect class=\"op {}\" x=\"{x:.2}\" y=\"{row_y:.2}\" width=\"{w:.2}\" height=\"{row_h:.2}\" fill=\"{}\" stroke=\"#2e3436\" stroke-width=\"0.3\"><title>{} mb={} chunk={} unit={} [{}..{}]</title></rect>\n",
                ev.kind,
                color_of(&ev.kind),
                ev.kind,
                ev.microbatch.map_or(-1i64, |m| m as i64),
                ev.chunk.map_or(-1i64, |c| c as i64),
                ev.unit.map_or(-1i64, |u| u as i64),
                ev.start,
                ev.end
            ));
            if !ev.comm && w >= 13.0 {
                if let Some(mb) = ev.microbatch {
                    out.push_str(&format!(
                        "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#ffffff\">{mb}</text>\n",
                        x + 1.5,
                        row_y + COMPUTE_ROW * 0.65
                    ));
                }
            }
        }
        out.push_str("</g>\n");
    }

    let axis_y = TOP_MARGIN + trace.ranks as f64 * LANE_HEIGHT + 12.0;
    out.push_str(&format!(
        "<text x=\"{LEFT_MARGIN:.1}\" y=\"{axis_y:.1}\">0</text>\n<text x=\"{:.1}\" y=\"{axis_y:.1}\" text-anchor=\"end\">{}</text>\n",
        LEFT_MARGIN + PLOT_WIDTH,
        trace.iteration_time
    ));
    out.push_str("</svg>\n");
    out
}
