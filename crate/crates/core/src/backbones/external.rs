//! External scorer protocol: a long-lived child process reads one image path
//! per line on stdin and answers one probability in `[0, 1]` per line on stdout.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::error::{Error, Result};

struct Pipes {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalScorer {
    child: Mutex<Child>,
    pipes: Mutex<Pipes>,
    scratch: tempfile::TempDir,
}

impl ExternalScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(Self {
            child: Mutex::new(child),
            pipes: Mutex::new(Pipes { stdin, stdout }),
            scratch,
        })
    }

    /// Sends one request and waits for its answer.
    pub fn score_path(&self, image: &Path) -> Result<f64> {
        let mut pipes = self.pipes.lock().expect("scorer pipe lock poisoned");
        let path_str = image.to_str().ok_or_else(|| Error::validation("image path is not UTF-8"))?;
        if path_str.contains('\n') {
            return Err(Error::validation("image path contains a newline"));
        }
        writeln!(pipes.stdin, "{path_str}")
            .and_then(|_| pipes.stdin.flush())
            .map_err(|e| Error::io(image, e))?;
        let mut line = String::new();
        let n = pipes.stdout.read_line(&mut line).map_err(|e| Error::io(image, e))?;
        if n == 0 {
            return Err(Error::validation("external scorer closed its output"));
        }
        let p: f64 = line
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("external scorer answered `{}`", line.trim())))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!("external scorer answered {p}, outside [0, 1]")));
        }
        Ok(p)
    }

    /// Scratch directory for images written before scoring.
    pub fn scratch_dir(&self) -> &Path {
        self.scratch.path()
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
