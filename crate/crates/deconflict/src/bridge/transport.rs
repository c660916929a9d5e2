//! Line transports. Every connection is a writer for outgoing frames plus a
//! channel of incoming lines filled by a reader thread, so reads can time
//! out without blocking the engine.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

/// `Write` end that forwards each completed line over a channel.
pub struct ChannelSink {
    buf: Vec<u8>,
    tx: Sender<String>,
}

impl ChannelSink {
    pub fn new(tx: Sender<String>) -> Self {
        Self { buf: Vec::new(), tx }
    }
}

impl Write for ChannelSink {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        self.buf.extend_from_slice(data);
        while let Some(i) = self.buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=i).collect();
            let text = String::from_utf8_lossy(&line[..i]).into_owned();
            self.tx
                .send(text)
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer hung up"))?;
        }
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub enum Recv {
    Line(String),
    Timeout,
    Closed,
}

pub struct Connection {
    writer: Box<dyn Write + Send>,
    incoming: Receiver<String>,
    child: Option<Child>,
    server: Option<JoinHandle<()>>,
    description: String,
}

fn pump<R: BufRead + Send + 'static>(reader: R) -> Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

impl Connection {
    /// Any reader/writer pair, e.g. two halves of a socket.
    pub fn from_streams<R, W>(reader: R, writer: W, description: impl Into<String>) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            writer: Box::new(writer),
            incoming: pump(reader),
            child: None,
            server: None,
            description: description.into(),
        }
    }

    /// Spawn `cmd` and talk to it over its standard streams. Its stderr is
    /// inherited.
    pub fn spawn(cmd: &mut Command) -> io::Result<Self> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| io::Error::other("no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| io::Error::other("no stdout"))?;
        let mut conn = Self::from_streams(BufReader::new(stdout), BufWriter::new(stdin), format!("{cmd:?}"));
        conn.child = Some(child);
        Ok(conn)
    }

    pub fn tcp(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let description = format!("tcp {}", stream.peer_addr()?);
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::from_streams(reader, BufWriter::new(stream), description))
    }

    /// Run `server` on its own thread, connected through in-memory channels.
    /// It receives the engine's lines and a sink for its own.
    pub fn in_process<F>(server: F) -> Self
    where
        F: FnOnce(Receiver<String>, ChannelSink) + Send + 'static,
    {
        let (to_server, server_rx) = mpsc::channel();
        let (server_tx, from_server) = mpsc::channel();
        let handle = thread::spawn(move || server(server_rx, ChannelSink::new(server_tx)));
        Self {
            writer: Box::new(ChannelSink::new(to_server)),
            incoming: from_server,
            child: None,
            server: Some(handle),
            description: "loopback".into(),
        }
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Queue one line; call [`Connection::flush`] to push it out.
    pub fn send(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }

    pub fn recv(&mut self, deadline: Instant) -> Recv {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.incoming.recv_timeout(wait) {
            Ok(line) => Recv::Line(line),
            Err(RecvTimeoutError::Timeout) => Recv::Timeout,
            Err(RecvTimeoutError::Disconnected) => Recv::Closed,
        }
    }

    /// Close our end and reap the peer. A child that does not exit within
    /// `grace` is killed.
    pub fn shutdown(mut self, grace: Duration) {
        let _ = self.writer.flush();
        self.writer = Box::new(io::sink());
        if let Some(mut child) = self.child.take() {
            let until = Instant::now() + grace;
            loop {
                match child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) if Instant::now() >= until => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                    Ok(None) => thread::sleep(Duration::from_millis(5)),
                }
            }
        }
        if let Some(h) = self.server.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_sink_splits_lines() {
        let (tx, rx) = mpsc::channel();
        let mut s = ChannelSink::new(tx);
        s.write_all(b"ab").unwrap();
        s.write_all(b"c\nde\nf").unwrap();
        drop(s);
        assert_eq!(rx.iter().collect::<Vec<_>>(), vec!["abc", "de"]);
    }

    #[test]
    fn in_process_echo_and_close() {
        let mut c = Connection::in_process(|rx, mut out| {
            for line in rx.iter().take(2) {
                writeln!(out, "echo {line}").unwrap();
            }
        });
        c.send("one").unwrap();
        c.send("two").unwrap();
        let deadline = Instant::now() + Duration::from_secs(5);
        for want in ["echo one", "echo two"] {
            match c.recv(deadline) {
                Recv::Line(l) => assert_eq!(l, want),
                _ => panic!("expected a line"),
            }
        }
        assert!(matches!(c.recv(deadline), Recv::Closed));
        c.shutdown(Duration::from_millis(10));
    }

    #[test]
    fn recv_times_out() {
        let mut c = Connection::in_process(|rx, _out| {
            let _ = rx.recv();
        });
        assert!(matches!(c.recv(Instant::now() + Duration::from_millis(20)), Recv::Timeout));
        c.send("done").unwrap();
        c.shutdown(Duration::from_millis(10));
    }
}
