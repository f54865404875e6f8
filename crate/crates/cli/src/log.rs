//! Structured JSON log lines on stderr.

pub fn info(stage: &str, msg: &str) {
    emit("info", stage, msg);
}

pub fn warn(stage: &str, msg: &str) {
    emit("warn", stage, msg);
}

fn emit(level: &str, stage: &str, msg: &str) {
    eprintln!(
        "{}",
        serde_json::json!({"level": level, "stage": stage, "msg": msg})
    );
}
