use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{ExecResult, TIMEOUT_EXIT_CODE};

#[derive(Default)]
struct Capture {
    data: Vec<u8>,
    overflow: bool,
    done: bool,
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R, cap: usize) -> Arc<Mutex<Capture>> {
    let cap_buf = Arc::new(Mutex::new(Capture::default()));
    let sink = Arc::clone(&cap_buf);
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut c = sink.lock().unwrap();
                    let room = cap.saturating_sub(c.data.len());
                    if n > room {
                        c.overflow = true;
                    }
                    let take = n.min(room);
                    c.data.extend_from_slice(&buf[..take]);
                }
            }
        }
        sink.lock().unwrap().done = true;
    });
    cap_buf
}

fn kill_group(child: &Child) {
    // The child leads its own process group; signal the whole group.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

/// Runs `cmd` in its own process group with captured, capped output.
///
/// On timeout the whole group is killed and the result carries
/// [`TIMEOUT_EXIT_CODE`]. Output past `cap` bytes per stream is drained and
/// dropped.
pub fn run_capped(cmd: &mut Command, timeout: Duration, cap: usize) -> io::Result<ExecResult> {
    let start = Instant::now();
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let mut child = cmd.spawn()?;
    let out = spawn_reader(child.stdout.take().expect("piped stdout"), cap);
    let err = spawn_reader(child.stderr.take().expect("piped stderr"), cap);

    let deadline = start + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    if !timed_out {
        // Background jobs left in the group would keep the pipes open.
        kill_group(&child);
    }
    // Processes that left the group could still hold the pipes; bound the wait.
    let drain_until = Instant::now() + Duration::from_secs(2);
    while !(out.lock().unwrap().done && err.lock().unwrap().done) && Instant::now() < drain_until {
        thread::sleep(Duration::from_millis(2));
    }

    let take = |c: &Arc<Mutex<Capture>>| {
        let mut c = c.lock().unwrap();
        (std::mem::take(&mut c.data), c.overflow)
    };
    let (stdout, out_over) = take(&out);
    let (stderr, err_over) = take(&err);

    let exit_code = if timed_out {
        TIMEOUT_EXIT_CODE
    } else {
        status.code().unwrap_or_else(|| {
            use std::os::unix::process::ExitStatusExt;
            128 + status.signal().unwrap_or(0)
        })
    };
    Ok(ExecResult {
        stdout,
        stderr,
        exit_code,
        duration: start.elapsed().as_secs_f64(),
        truncated: out_over || err_over,
        timed_out,
    })
}
