use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use oval_core::mock::MockResponder;
use tokio::sync::oneshot;

const BODY_LIMIT: usize = 64 * 1024 * 1024;

async fn dispatch(State(responder): State<Arc<MockResponder>>, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path().to_string();
    let reply = tokio::task::spawn_blocking(move || responder.handle(method.as_str(), &path, &body)).await;
    match reply {
        Ok(r) => {
            let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, [(header::CONTENT_TYPE, "application/json")], r.body).into_response()
        }
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            [(header::CONTENT_TYPE, "application/json")],
            serde_json::json!({"error": "internal", "message": e.to_string()}).to_string(),
        )
            .into_response(),
    }
}

fn router(responder: Arc<MockResponder>) -> Router {
    Router::new()
        .fallback(dispatch)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(responder)
}

fn bind(addr: &str) -> io::Result<TcpListener> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

/// The mock backend behind a real socket, served from a background thread.
pub struct MockServer {
    addr: SocketAddr,
    responder: Arc<MockResponder>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl MockServer {
    /// Binds `bind` (port 0 picks a free port) and starts serving.
    pub fn start(responder: MockResponder, bind_addr: &str) -> io::Result<MockServer> {
        let listener = bind(bind_addr)?;
        let addr = listener.local_addr()?;
        let responder = Arc::new(responder);
        let app = router(responder.clone());
        let rt = runtime()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("oval-mock".into()).spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await
            })
        })?;
        Ok(MockServer {
            addr,
            responder,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn responder(&self) -> &MockResponder {
        &self.responder
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("mock server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Serves on the calling thread until SIGINT/SIGTERM. `on_bound` runs once the
/// socket is listening and the signal handlers are installed, so a signal sent
/// right after the announcement still shuts down gracefully.
pub fn serve_until_signal(responder: MockResponder, bind_addr: &str, on_bound: impl FnOnce(SocketAddr)) -> io::Result<()> {
    let listener = bind(bind_addr)?;
    let addr = listener.local_addr()?;
    let app = router(Arc::new(responder));
    runtime()?.block_on(async move {
        let stop = shutdown_signal()?;
        let listener = tokio::net::TcpListener::from_std(listener)?;
        on_bound(addr);
        axum::serve(listener, app).with_graceful_shutdown(stop).await
    })
}

/// Registers the handlers immediately; the returned future resolves on the
/// first signal.
#[cfg(unix)]
fn shutdown_signal() -> io::Result<impl std::future::Future<Output = ()>> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut int = signal(SignalKind::interrupt())?;
    let mut term = signal(SignalKind::terminate())?;
    Ok(async move {
        tokio::select! {
            _ = int.recv() => {}
            _ = term.recv() => {}
        }
    })
}

#[cfg(not(unix))]
fn shutdown_signal() -> io::Result<impl std::future::Future<Output = ()>> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}
