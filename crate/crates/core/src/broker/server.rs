use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use crate::error::{Error, ErrorCode, Result};

use super::config::BrokerConfig;
use super::protocol::{Request, Response, read_frame, write_frame};
use super::service::Service;

const ACCEPT_POLL: Duration = Duration::from_millis(20);

#[derive(Default)]
struct Conns {
    next: AtomicU64,
    open: Mutex<Vec<(u64, TcpStream)>>,
}

/// A running broker: an accept thread plus one thread per connection.
pub struct Broker {
    service: Arc<Service>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Conns>,
}

impl Broker {
    /// Recovers the data directory, creates what the config names and
    /// starts listening. Fails if another broker holds the directory.
    pub fn start(config: &BrokerConfig) -> Result<Broker> {
        config.validate()?;
        let service = Service::open_dir(&config.data_dir, config.engine_config())?;
        if let Err(e) = service.apply_config(config) {
            let _ = service.shutdown();
            return Err(e);
        }
        match Self::serve(service.clone(), &config.listen) {
            Ok(b) => Ok(b),
            Err(e) => {
                let _ = service.shutdown();
                Err(e)
            }
        }
    }

    pub fn serve(service: Arc<Service>, listen: &str) -> Result<Broker> {
        let listener = TcpListener::bind(listen).map_err(|e| Error::Unavailable(format!("bind {listen}: {e}")))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Conns::default());
        let accept = {
            let (service, stop, conns) = (service.clone(), stop.clone(), conns.clone());
            thread::Builder::new()
                .name("qdb-accept".into())
                .spawn(move || accept_loop(listener, service, stop, conns))?
        };
        log::info!("broker listening on {addr}");
        Ok(Broker { service, addr, stop, accept: Some(accept), conns })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Flag that, once set, makes `wait` return and shut the broker down.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn connections(&self) -> usize {
        self.conns.open.lock().len()
    }

    /// Blocks until the stop flag is set, then shuts down.
    pub fn wait(self) -> Result<()> {
        while !self.stop.load(Ordering::SeqCst) {
            thread::sleep(ACCEPT_POLL);
        }
        self.shutdown()
    }

    /// Stops accepting, disconnects clients (aborting their open
    /// transactions) and checkpoints.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop_serving();
        self.service.shutdown()
    }

    fn stop_serving(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.conns.open.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop_serving();
    }
}

fn accept_loop(listener: TcpListener, service: Arc<Service>, stop: Arc<AtomicBool>, conns: Arc<Conns>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = conns.next.fetch_add(1, Ordering::SeqCst);
                if let Ok(clone) = stream.try_clone() {
                    conns.open.lock().push((id, clone));
                }
                let (service, conns) = (service.clone(), conns.clone());
                let spawned = thread::Builder::new().name(format!("qdb-conn-{id}")).spawn(move || {
                    log::debug!("connection {id} from {peer}");
                    if let Err(e) = serve_connection(stream, &service) {
                        log::debug!("connection {id} ended: {e}");
                    }
                    conns.open.lock().retain(|(c, _)| *c != id);
                });
                if let Err(e) = spawned {
                    log::error!("cannot serve connection: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

/// Request/reply loop of one connection. A frame that cannot be decoded
/// gets an error reply and the connection carries on; a frame header that
/// cannot be trusted ends the connection. The session, and with it every
/// open transaction, is dropped when the loop ends.
fn serve_connection(stream: TcpStream, service: &Arc<Service>) -> io::Result<()> {
    let mut session = service.session();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let reply = Response::Error { code: ErrorCode::Usage, message: e.to_string() };
                let _ = write_frame(&mut writer, &reply.encode(0));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let (op, reply) = match Request::decode(&body) {
            Ok(req) => (req.opcode(), session.handle(req)),
            Err(e) => (0, Response::Error { code: ErrorCode::Usage, message: format!("bad request: {e}") }),
        };
        write_frame(&mut writer, &reply.encode(op))?;
    }
}
