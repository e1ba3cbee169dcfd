//! Moving [`ParamMessage`]s between the server and client workers.
//!
//! TCP framing: u32 big-endian length, then the body. Server-to-client
//! bodies are a u64 LE iteration budget followed by the encoded global
//! message; an empty body asks the client to shut down. A client opens with
//! an 8-byte LE client id and answers each round with a status byte
//! (0 = ok, 1 = numerical abort, 2 = other failure, 3 = ok and the client
//! has met its stopping rule) followed by the encoded reply or the failure
//! details.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;

use super::ParamMessage;
use crate::{Error, Result};

const MAX_FRAME: usize = 1 << 30;

/// A client's side of a round: apply the global, train, snapshot.
pub trait LocalTrainer: Send {
    fn client_id(&self) -> u64;
    fn train_round(&mut self, global: &ParamMessage, iters: u64) -> Result<ParamMessage>;

    /// Whether the client's own stopping rule has fired.
    fn finished(&self) -> bool {
        false
    }
}

pub trait Transport {
    /// Delivers `global` to every client and returns their replies in
    /// ascending client-id order.
    fn exchange(&mut self, global: &ParamMessage, iters: u64) -> Result<Vec<ParamMessage>>;

    /// True once every client reported [`LocalTrainer::finished`] after the
    /// latest exchange.
    fn all_finished(&self) -> bool;
}

pub fn send_frame(w: &mut impl Write, body: &[u8]) -> Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn recv_frame(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(Error::Invalid(format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    read_exact(r, &mut body)?;
    Ok(body)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("frame"),
        _ => Error::Io(e),
    })
}

pub fn send_message(w: &mut impl Write, msg: &ParamMessage) -> Result<()> {
    send_frame(w, &msg.encode())
}

/// Reads one whole frame before decoding, so a corrupt message leaves the
/// stream aligned on the next frame.
pub fn recv_message(r: &mut impl Read) -> Result<ParamMessage> {
    ParamMessage::decode(&recv_frame(r)?)
}

fn client_error(client: u64, round: u64, source: Error) -> Error {
    Error::Client {
        client,
        round,
        source: Box::new(source),
    }
}

/// Same-process delivery through the encoded byte form.
pub struct InProcess<T> {
    pub workers: Vec<T>,
}

impl<T: LocalTrainer> InProcess<T> {
    pub fn new(mut workers: Vec<T>) -> Self {
        workers.sort_by_key(|w| w.client_id());
        InProcess { workers }
    }

    pub fn into_workers(self) -> Vec<T> {
        self.workers
    }
}

impl<T: LocalTrainer> Transport for InProcess<T> {
    fn exchange(&mut self, global: &ParamMessage, iters: u64) -> Result<Vec<ParamMessage>> {
        let wire = global.encode();
        let mut out = Vec::with_capacity(self.workers.len());
        for w in &mut self.workers {
            let id = w.client_id();
            let received = ParamMessage::decode(&wire)?;
            let reply = w
                .train_round(&received, iters)
                .map_err(|e| client_error(id, global.round, e))?;
            out.push(ParamMessage::decode(&reply.encode())?);
        }
        Ok(out)
    }

    fn all_finished(&self) -> bool {
        self.workers.iter().all(|w| w.finished())
    }
}

/// Loopback TCP with one thread per client worker.
pub struct TcpTransport<T> {
    conns: Vec<(u64, TcpStream)>,
    handles: Vec<JoinHandle<Result<T>>>,
    finished: bool,
}

fn serve_client<T: LocalTrainer>(mut worker: T, addr: std::net::SocketAddr) -> Result<T> {
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    send_frame(&mut s, &worker.client_id().to_le_bytes())?;
    loop {
        let body = recv_frame(&mut s)?;
        if body.is_empty() {
            return Ok(worker);
        }
        if body.len() < 8 {
            return Err(Error::Truncated("round frame"));
        }
        let iters = u64::from_le_bytes(body[..8].try_into().unwrap());
        let reply = ParamMessage::decode(&body[8..]).and_then(|g| worker.train_round(&g, iters));
        let mut out = Vec::new();
        match reply {
            Ok(m) => {
                out.push(if worker.finished() { 3 } else { 0 });
                out.extend(m.encode());
            }
            Err(Error::Numerical { iter, seed, detail }) => {
                out.push(1);
                out.extend(iter.to_le_bytes());
                out.extend(seed.to_le_bytes());
                out.extend(detail.into_bytes());
            }
            Err(e) => {
                out.push(2);
                out.extend(e.to_string().into_bytes());
            }
        }
        send_frame(&mut s, &out)?;
    }
}

impl<T: LocalTrainer + 'static> TcpTransport<T> {
    pub fn spawn(workers: Vec<T>) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let n = workers.len();
        let handles = workers
            .into_iter()
            .map(|w| std::thread::spawn(move || serve_client(w, addr)))
            .collect();
        let mut conns = Vec::with_capacity(n);
        for _ in 0..n {
            let (mut s, _) = listener.accept()?;
            s.set_nodelay(true)?;
            let hello = recv_frame(&mut s)?;
            let id = u64::from_le_bytes(
                hello
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Truncated("client hello"))?,
            );
            conns.push((id, s));
        }
        conns.sort_by_key(|(id, _)| *id);
        Ok(TcpTransport {
            conns,
            handles,
            finished: false,
        })
    }

    /// Shuts every client down and returns the workers in client-id order.
    pub fn finish(mut self) -> Result<Vec<T>> {
        for (_, s) in &mut self.conns {
            let _ = send_frame(s, &[]);
        }
        let mut workers = Vec::new();
        for h in self.handles {
            let w = h.join().map_err(|_| Error::Invalid("client thread panicked".into()))??;
            workers.push(w);
        }
        workers.sort_by_key(|w| w.client_id());
        Ok(workers)
    }
}

impl<T> Transport for TcpTransport<T> {
    fn exchange(&mut self, global: &ParamMessage, iters: u64) -> Result<Vec<ParamMessage>> {
        let mut body = iters.to_le_bytes().to_vec();
        body.extend(global.encode());
        for (_, s) in &mut self.conns {
            send_frame(s, &body)?;
        }
        let mut out = Vec::with_capacity(self.conns.len());
        let mut failure = None;
        let mut all = true;
        for (id, s) in &mut self.conns {
            let frame = recv_frame(s)?;
            let (status, rest) = frame.split_first().ok_or(Error::Truncated("reply frame"))?;
            let res = match status {
                0 | 3 => {
                    all &= *status == 3;
                    ParamMessage::decode(rest)
                }
                1 if rest.len() >= 16 => Err(Error::Numerical {
                    iter: u64::from_le_bytes(rest[..8].try_into().unwrap()),
                    seed: u64::from_le_bytes(rest[8..16].try_into().unwrap()),
                    detail: String::from_utf8_lossy(&rest[16..]).into_owned(),
                }),
                _ => Err(Error::Invalid(String::from_utf8_lossy(rest).into_owned())),
            };
            match res {
                Ok(m) => out.push(m),
                Err(e) => {
                    failure.get_or_insert(client_error(*id, global.round, e));
                }
            }
        }
        self.finished = all;
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn all_finished(&self) -> bool {
        self.finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_frame_leaves_stream_usable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let msg = ParamMessage {
            client_id: 1,
            round: 1,
            n_c: 2,
            fingerprint: [3; 8],
            payload: vec![0.25; 10],
        };
        let m2 = msg.clone();
        let t = std::thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            let mut bad = m2.encode();
            bad[60] ^= 0xff;
            send_frame(&mut s, &bad).unwrap();
            send_message(&mut s, &m2).unwrap();
        });
        let (mut s, _) = listener.accept().unwrap();
        assert!(matches!(recv_message(&mut s), Err(Error::Crc { .. })));
        assert_eq!(recv_message(&mut s).unwrap(), msg);
        t.join().unwrap();
        assert!(matches!(recv_frame(&mut s), Err(Error::Truncated(_))));
    }
}
