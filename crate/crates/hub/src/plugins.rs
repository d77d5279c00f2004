//! Launching the external detector, trainer and embedder commands.

use std::env;
use std::path::{Path, PathBuf};
use std::process::Stdio;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, Command};
use tokio::sync::mpsc;

use crate::session::{TrainingJob, TrainingReport};

/// A plugin command line split into program and leading arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginCommand {
    pub plugin: &'static str,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub display: String,
}

impl PluginCommand {
    /// Splits `command` shell-style and finds the program on disk or on `PATH`.
    pub fn resolve(plugin: &'static str, command: &str) -> Result<Self, String> {
        let words = shlex::split(command).ok_or_else(|| "unbalanced quotes".to_string())?;
        let (program, args) = words.split_first().ok_or_else(|| "command is empty".to_string())?;
        let program = find_program(program).ok_or_else(|| format!("`{program}` not found"))?;
        Ok(Self { plugin, program, args: args.to_vec(), display: command.to_string() })
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args).kill_on_drop(true);
        cmd
    }
}

fn find_program(name: &str) -> Option<PathBuf> {
    let path = Path::new(name);
    if path.components().count() > 1 {
        return path.is_file().then(|| path.to_path_buf());
    }
    env::split_paths(&env::var_os("PATH")?).map(|dir| dir.join(name)).find(|p| p.is_file())
}

/// Output of the detector, tagged with the generation that produced it so
/// lines from a replaced process can be told apart.
#[derive(Debug)]
pub enum DetectorOutput {
    Line(u64, String),
    Exited(u64, String),
}

/// A running detector process.
pub struct Detector {
    pub generation: u64,
    stdin: mpsc::UnboundedSender<String>,
    _child: Child,
}

impl Detector {
    pub fn spawn(
        command: &PluginCommand,
        weights: &Path,
        model_version: &str,
        generation: u64,
        output: mpsc::UnboundedSender<DetectorOutput>,
    ) -> std::io::Result<Self> {
        let mut child = command
            .command()
            .arg("--weights")
            .arg(weights)
            .arg("--model-version")
            .arg(model_version)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();

        let exit = output.clone();
        tokio::spawn(async move {
            while let Some(line) = rx.recv().await {
                let written = async {
                    stdin.write_all(line.as_bytes()).await?;
                    stdin.write_all(b"\n").await?;
                    stdin.flush().await
                };
                if let Err(e) = written.await {
                    let _ = exit.send(DetectorOutput::Exited(generation, format!("stdin closed: {e}")));
                    break;
                }
            }
        });
        tokio::spawn(async move {
            let mut lines = BufReader::new(stdout).lines();
            loop {
                match lines.next_line().await {
                    Ok(Some(line)) if line.trim().is_empty() => {}
                    Ok(Some(line)) => {
                        if output.send(DetectorOutput::Line(generation, line)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {
                        let _ = output.send(DetectorOutput::Exited(generation, "detector exited".into()));
                        break;
                    }
                    Err(e) => {
                        let _ = output.send(DetectorOutput::Exited(generation, format!("unreadable output: {e}")));
                        break;
                    }
                }
            }
        });
        Ok(Self { generation, stdin: tx, _child: child })
    }

    /// Queues a line for the detector; false if it is gone.
    pub fn send(&self, line: String) -> bool {
        self.stdin.send(line).is_ok()
    }
}

/// Runs the embedder (if any) and then the trainer for one round.
pub async fn run_training(job: TrainingJob, trainer: PluginCommand, embedder: Option<PluginCommand>) -> TrainingReport {
    let mut embeddings = None;
    if let Some(embedder) = embedder {
        let status = embedder
            .command()
            .arg("--dataset")
            .arg(&job.dataset)
            .arg("--out")
            .arg(&job.embeddings_out)
            .stdin(Stdio::null())
            .status()
            .await;
        match status {
            Ok(s) if s.success() => embeddings = Some(job.embeddings_out.clone()),
            Ok(s) => tracing::warn!("embedder `{}` exited with {s}; round {} will be unscored", embedder.display, job.round),
            Err(e) => tracing::warn!("embedder `{}` failed to start: {e}; round {} will be unscored", embedder.display, job.round),
        }
    }
    let status = trainer
        .command()
        .arg("--dataset")
        .arg(&job.dataset)
        .arg("--base-weights")
        .arg(&job.base_weights)
        .arg("--out-weights")
        .arg(&job.out_weights)
        .stdin(Stdio::null())
        .status()
        .await;
    let result = match status {
        Ok(s) if s.success() && job.out_weights.is_file() => Ok(()),
        Ok(s) if s.success() => Err(format!("trainer exited 0 without writing {}", job.out_weights.display())),
        Ok(s) => Err(format!("trainer exited with {s}")),
        Err(e) => Err(format!("trainer `{}` failed to start: {e}", trainer.display)),
    };
    TrainingReport { round: job.round, result, embeddings }
}
