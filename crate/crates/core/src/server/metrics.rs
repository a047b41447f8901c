use std::io::{self, Write};
use std::sync::atomic::Ordering;

use super::{hex_id, Server};

/// Per-second CSV log: one row per session plus a model row.
pub struct MetricsWriter<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, header_written: false }
    }

    pub fn write_rows(&mut self, server: &Server) -> io::Result<()> {
        if !self.header_written {
            writeln!(self.out, "t_s,link,role,connected,bytes_in,bytes_out,blocks_out,pending,tsdf_blocks,mc_blocks")?;
            self.header_written = true;
        }
        let t = server.uptime().as_secs_f64();
        let (tsdf, mc) = (server.tsdf_map().len(), server.mc_map().len());
        writeln!(self.out, "{t:.3},model,-,-,0,0,0,0,{tsdf},{mc}")?;
        let mut sessions = server.sessions();
        sessions.sort_by_key(|s| s.id);
        for s in sessions {
            writeln!(
                self.out,
                "{t:.3},{},{:?},{},{},{},{},{},{tsdf},{mc}",
                hex_id(&s.id),
                s.role,
                u8::from(s.is_connected()),
                s.bytes_in.load(Ordering::Relaxed),
                s.bytes_out.load(Ordering::Relaxed),
                s.blocks_out.load(Ordering::Relaxed),
                s.pending(),
            )?;
        }
        self.out.flush()
    }
}
