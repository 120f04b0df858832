use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};

/// Writes each record to stderr as one JSON object per line.
struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

/// Installs the JSON logger once; `INTROSPECT3D_LOG` picks the level.
pub fn init() {
    let level = std::env::var("INTROSPECT3D_LOG")
        .ok()
        .and_then(|s| s.parse::<Level>().ok())
        .map_or(LevelFilter::Info, |l| l.to_level_filter());
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}
