pub mod detection;
pub mod mtl;
pub mod report;
pub mod segmentation;
pub mod tables;

pub use detection::{box_iou, compute_map, MapAccumulator, MapResult};
pub use mtl::{average_score, delta_mtl, round_half_up, MetricVector};
pub use report::{emit_report, EvalReport, ReportFormat};
pub use segmentation::{compute_lane_iou, compute_miou, ConfusionMatrix, LaneIou};
