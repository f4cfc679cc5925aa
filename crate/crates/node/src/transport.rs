//! TCP carriage for federation stanzas: one line per stanza.

use std::io;

use dims_core::NodeId;
use dims_federation::stanza::MAX_LINE;
use dims_federation::ConnId;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::runtime::{Input, NodeHandle};

/// Accepts peer connections until the node stops.
pub async fn serve(listener: TcpListener, handle: NodeHandle) -> io::Result<()> {
    loop {
        let (stream, addr) = listener.accept().await?;
        tracing::debug!(%addr, "federation connection");
        if !attach(&handle, stream, None) {
            return Ok(());
        }
    }
}

pub(crate) fn dial(handle: NodeHandle, peer: NodeId, address: String) {
    tokio::spawn(async move {
        let limit = handle.handshake_timeout();
        match tokio::time::timeout(limit, TcpStream::connect(&address)).await {
            Ok(Ok(stream)) => {
                attach(&handle, stream, Some(peer));
            }
            Ok(Err(e)) => {
                tracing::debug!(%peer, %address, error = %e, "dial failed");
                handle.send(Input::DialFailed(peer));
            }
            Err(_) => {
                tracing::debug!(%peer, %address, "dial timed out");
                handle.send(Input::DialFailed(peer));
            }
        }
    });
}

/// Hands a socket to the node. Returns false once the node is gone.
fn attach(handle: &NodeHandle, stream: TcpStream, dialed: Option<NodeId>) -> bool {
    let _ = stream.set_nodelay(true);
    let conn = handle.next_conn();
    let (read, mut write) = stream.into_split();
    let (wtx, mut wrx) = mpsc::unbounded_channel::<Vec<u8>>();
    tokio::spawn(async move {
        while let Some(line) = wrx.recv().await {
            if write.write_all(&line).await.is_err() {
                break;
            }
        }
        let _ = write.shutdown().await;
    });
    // lines must not reach the node before it knows the connection
    let (go, ready) = oneshot::channel::<()>();
    let reader_handle = handle.clone();
    let reader = tokio::spawn(async move {
        if ready.await.is_err() {
            return;
        }
        let _ = read_lines(read, conn, &reader_handle).await;
        reader_handle.send(Input::Closed(conn));
    });
    let ok = handle.send(Input::Connected {
        conn,
        dialed,
        writer: wtx,
        reader: reader.abort_handle(),
    });
    let _ = go.send(());
    ok
}

async fn read_lines<R: AsyncRead + Unpin>(read: R, conn: ConnId, handle: &NodeHandle) -> io::Result<()> {
    let mut reader = BufReader::new(read);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf).await?;
        if n == 0 {
            return Ok(());
        }
        let complete = buf.last() == Some(&b'\n');
        if !complete && buf.len() <= MAX_LINE {
            // eof in the middle of a line
            return Ok(());
        }
        if !handle.send(Input::Line(conn, buf.clone())) || !complete {
            return Ok(());
        }
    }
}
