//! Task scheduling and partial-label handling.

pub mod partial;
pub mod pseudo;
pub mod scheduler;
pub mod teacher;

pub use partial::{masked_mean, task_rows, zeroed_loss_mask};
pub use pseudo::{pseudo_label_dataset, PseudoReport};
pub use scheduler::{Draw, ScheduleConfig, Scheduler};
pub use teacher::{
    load_teacher, train_teacher, Teacher, TeacherBundle, TeacherReport, DEFAULT_DET_THRESHOLD,
};
