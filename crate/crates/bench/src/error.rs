use std::fmt;

/// Exit status of the `bench` binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Config = 2,
    Protocol = 3,
    Stage = 4,
}

/// Position of a failing stage within an experiment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Coordinates {
    pub condition: Option<String>,
    pub split: Option<usize>,
    pub variant: Option<String>,
    pub repetition: Option<usize>,
}

impl fmt::Display for Coordinates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(c) = &self.condition {
            parts.push(format!("condition={c}"));
        }
        if let Some(s) = self.split {
            parts.push(format!("split={s}"));
        }
        if let Some(v) = &self.variant {
            parts.push(format!("variant={v}"));
        }
        if let Some(r) = self.repetition {
            parts.push(format!("repetition={r}"));
        }
        if parts.is_empty() {
            f.write_str("experiment")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed at {at}: {source}")]
    Stage {
        stage: &'static str,
        at: Box<Coordinates>,
        #[source]
        source: gapbench::Error,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl BenchError {
    pub fn stage(stage: &'static str, at: Coordinates) -> impl FnOnce(gapbench::Error) -> Self {
        move |source| BenchError::Stage {
            stage,
            at: Box::new(at),
            source,
        }
    }

    pub fn io(context: impl fmt::Display) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.to_string();
        move |source| BenchError::Io { context, source }
    }

    pub fn exit_status(&self) -> ExitStatus {
        match self {
            BenchError::Config(_) => ExitStatus::Config,
            BenchError::Stage { source, .. } => match source {
                gapbench::Error::Config(_) => ExitStatus::Config,
                gapbench::Error::Protocol(_) | gapbench::Error::Integrity(_) => {
                    ExitStatus::Protocol
                }
                _ => ExitStatus::Stage,
            },
            BenchError::Io { .. } => ExitStatus::Stage,
        }
    }
}
