//! Filesystem-backed directory queue, safe for any number of concurrent
//! processes and threads sharing one locally mounted filesystem.
//!
//! Each message is a plain file. The layout keeps lexicographic order equal
//! to insertion order:
//!
//! ```text
//! <root>/556ba080/556ba08000f300        committed element
//! <root>/556ba080/556ba08000f301.tmp    write in flight, invisible to readers
//! <root>/556ba080/556ba08000f2ff.lck    element owned by one consumer
//! ```
//!
//! Bucket directories are the element's insertion second rounded down to the
//! queue granularity, rendered as eight hex digits. Element files are
//! fourteen hex digits: eight for the second, five for the microsecond, one
//! for a per-process counter. Payloads are published by writing to a `.tmp`
//! name and renaming into place, so a reader never observes partial bytes;
//! locking renames the element to a `.lck` name, so at most one consumer
//! ever owns it. A crash leaves `.tmp` or `.lck` evidence that [`DirQueue::purge`]
//! repairs.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

/// Default bucket granularity in seconds.
pub const DEFAULT_GRANULARITY: u64 = 60;
/// Default age after which an orphaned `.tmp` file is deleted by purge.
pub const DEFAULT_MAX_TMP_AGE: Duration = Duration::from_secs(300);
/// Default age after which a stale `.lck` suffix is stripped by purge.
pub const DEFAULT_MAX_LOCK_AGE: Duration = Duration::from_secs(600);

const TMP_SUFFIX: &str = ".tmp";
const LOCK_SUFFIX: &str = ".lck";

/// Process-wide counter feeding the last hex digit of element names.
static NAME_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Errors from directory-queue operations.
#[derive(Debug, Error)]
pub enum DirqError {
    #[error("queue I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("queue root {0} exists and is not a directory")]
    NotADirectory(PathBuf),

    #[error("granularity must be a positive number of seconds")]
    InvalidGranularity,

    #[error("element {0} is not locked")]
    NotLocked(String),

    #[error("malformed element name {0:?}")]
    InvalidName(String),
}

impl DirqError {
    fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DirqError::Io { path: path.into(), source }
    }
}

/// Name of one queue element: bucket directory plus file, `"dir/file"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementName {
    dir: String,
    file: String,
}

impl ElementName {
    /// Parses the canonical `"dir/file"` form.
    pub fn parse(s: &str) -> Result<Self, DirqError> {
        let (dir, file) = s
            .split_once('/')
            .ok_or_else(|| DirqError::InvalidName(s.to_string()))?;
        if !is_hex_name(dir, 8) || !is_hex_name(file, 14) {
            return Err(DirqError::InvalidName(s.to_string()));
        }
        Ok(ElementName { dir: dir.to_string(), file: file.to_string() })
    }

    /// Bucket directory component, eight hex digits.
    pub fn dir(&self) -> &str {
        &self.dir
    }

    /// File component, fourteen hex digits.
    pub fn file(&self) -> &str {
        &self.file
    }
}

impl std::fmt::Display for ElementName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.dir, self.file)
    }
}

fn is_hex_name(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Renders the bucket directory for an insertion second.
pub(crate) fn bucket_name(secs: u64, granularity: u64) -> String {
    let bucket = secs - secs % granularity;
    format!("{:08x}", bucket & 0xffff_ffff)
}

/// Renders the element file name for an insertion instant and counter.
pub(crate) fn element_file_name(secs: u64, micros: u32, counter: u8) -> String {
    format!("{:08x}{:05x}{:01x}", secs & 0xffff_ffff, micros, counter & 0xf)
}

/// Handle to a directory queue. Cheap to clone; all state lives on disk
/// apart from the process-wide name counter.
#[derive(Debug, Clone)]
pub struct DirQueue {
    root: PathBuf,
    granularity: u64,
    file_mode: u32,
}

impl DirQueue {
    /// Opens (creating if necessary) the queue rooted at `path` with the
    /// default granularity.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DirqError> {
        Self::open_with(path, DEFAULT_GRANULARITY)
    }

    /// Opens the queue with an explicit bucket granularity in seconds.
    pub fn open_with(path: impl AsRef<Path>, granularity: u64) -> Result<Self, DirqError> {
        if granularity == 0 {
            return Err(DirqError::InvalidGranularity);
        }
        let root = path.as_ref().to_path_buf();
        match fs::metadata(&root) {
            Ok(meta) if meta.is_dir() => {}
            Ok(_) => return Err(DirqError::NotADirectory(root)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::create_dir_all(&root).map_err(|e| DirqError::io(&root, e))?;
            }
            Err(e) => return Err(DirqError::io(&root, e)),
        }
        Ok(DirQueue { root, granularity, file_mode: 0o644 })
    }

    /// Sets the permission mask applied to element files.
    pub fn with_file_mode(mut self, mode: u32) -> Self {
        self.file_mode = mode;
        self
    }

    /// Queue root directory.
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Bucket granularity in seconds.
    pub fn granularity(&self) -> u64 {
        self.granularity
    }

    /// Adds a payload and returns the name it was committed under.
    ///
    /// The payload is written to a `.tmp` file and renamed into place, so
    /// concurrent iterators either see the whole element or none of it.
    pub fn add(&self, payload: &[u8]) -> Result<ElementName, DirqError> {
        loop {
            let (secs, micros) = now_micros();
            let counter = (NAME_COUNTER.fetch_add(1, Ordering::Relaxed) & 0xf) as u8;
            let dir = bucket_name(secs, self.granularity);
            let file = element_file_name(secs, micros, counter);
            let bucket = self.root.join(&dir);
            let tmp = bucket.join(format!("{file}{TMP_SUFFIX}"));

            match self.create_tmp(&bucket, &tmp) {
                Ok(mut f) => {
                    f.write_all(payload).map_err(|e| DirqError::io(&tmp, e))?;
                    f.flush().map_err(|e| DirqError::io(&tmp, e))?;
                    drop(f);
                    let dest = bucket.join(&file);
                    fs::rename(&tmp, &dest).map_err(|e| DirqError::io(&dest, e))?;
                    return Ok(ElementName { dir, file });
                }
                // Name collision: the counter wrapped within one microsecond
                // tick. Re-read the clock and try again.
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(DirqError::io(&tmp, e)),
            }
        }
    }

    fn create_tmp(&self, bucket: &Path, tmp: &Path) -> io::Result<File> {
        let mut opts = OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(self.file_mode);
        }
        match opts.open(tmp) {
            Ok(f) => Ok(f),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                // Bucket missing (first use, or purge removed it between our
                // mkdir and the create). Make it and retry once.
                fs::create_dir_all(bucket)?;
                opts.open(tmp)
            }
            Err(e) => Err(e),
        }
    }

    /// Iterates all committed, unlocked elements in lexicographic
    /// (approximately chronological) order. Each bucket is scanned once;
    /// elements added or removed mid-iteration may or may not appear, and a
    /// yielded name may already be gone by the time it is locked.
    pub fn iter(&self) -> Result<ElementIter, DirqError> {
        let mut buckets: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| DirqError::io(&self.root, e))? {
            let entry = entry.map_err(|e| DirqError::io(&self.root, e))?;
            if let Some(name) = entry.file_name().to_str() {
                if is_hex_name(name, 8) {
                    buckets.push(name.to_string());
                }
            }
        }
        buckets.sort();
        buckets.reverse(); // consumed back to front by pop()
        Ok(ElementIter { queue: self.clone(), buckets, current: Vec::new() })
    }

    /// Number of committed, unlocked elements.
    pub fn count(&self) -> Result<usize, DirqError> {
        let mut n = 0;
        for name in self.iter()? {
            name?;
            n += 1;
        }
        Ok(n)
    }

    /// Attempts to take exclusive ownership of an element.
    ///
    /// Returns `true` only when this call renamed the element to its locked
    /// name; `false` means somebody else holds it or it no longer exists.
    pub fn lock(&self, name: &ElementName) -> Result<bool, DirqError> {
        let src = self.element_path(name);
        let dst = self.lock_path(name);
        match rename_no_replace(&src, &dst) {
            Ok(()) => {
                // Stamp the lock time so purge measures lock age, not
                // payload age. Best effort: a failure here only makes purge
                // break the lock a little early.
                if let Ok(f) = OpenOptions::new().write(true).open(&dst) {
                    let _ = f.set_modified(SystemTime::now());
                }
                Ok(true)
            }
            Err(e)
                if e.kind() == io::ErrorKind::NotFound
                    || e.kind() == io::ErrorKind::AlreadyExists =>
            {
                Ok(false)
            }
            Err(e) => Err(DirqError::io(&src, e)),
        }
    }

    /// Reads the payload of an element previously locked by [`DirQueue::lock`].
    pub fn get(&self, name: &ElementName) -> Result<Vec<u8>, DirqError> {
        let path = self.lock_path(name);
        let mut buf = Vec::new();
        match File::open(&path) {
            Ok(mut f) => {
                f.read_to_end(&mut buf).map_err(|e| DirqError::io(&path, e))?;
                Ok(buf)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(DirqError::NotLocked(name.to_string()))
            }
            Err(e) => Err(DirqError::io(&path, e)),
        }
    }

    /// Permanently removes a locked element.
    pub fn remove(&self, name: &ElementName) -> Result<(), DirqError> {
        let path = self.lock_path(name);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(DirqError::NotLocked(name.to_string()))
            }
            Err(e) => Err(DirqError::io(&path, e)),
        }
    }

    /// Returns a locked element to the queue.
    pub fn unlock(&self, name: &ElementName) -> Result<(), DirqError> {
        let src = self.lock_path(name);
        let dst = self.element_path(name);
        match fs::rename(&src, &dst) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(DirqError::NotLocked(name.to_string()))
            }
            Err(e) => Err(DirqError::io(&src, e)),
        }
    }

    /// Repairs crash leftovers with the default age thresholds.
    pub fn purge_default(&self) -> Result<PurgeReport, DirqError> {
        self.purge(DEFAULT_MAX_TMP_AGE, DEFAULT_MAX_LOCK_AGE)
    }

    /// Deletes `.tmp` files older than `max_tmp_age`, strips `.lck` suffixes
    /// older than `max_lock_age` (returning those elements to the queue) and
    /// removes empty bucket directories from expired time windows.
    pub fn purge(
        &self,
        max_tmp_age: Duration,
        max_lock_age: Duration,
    ) -> Result<PurgeReport, DirqError> {
        let now = SystemTime::now();
        let mut report = PurgeReport::default();
        let mut buckets: Vec<String> = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| DirqError::io(&self.root, e))? {
            let entry = entry.map_err(|e| DirqError::io(&self.root, e))?;
            if let Some(name) = entry.file_name().to_str() {
                if is_hex_name(name, 8) {
                    buckets.push(name.to_string());
                }
            }
        }
        buckets.sort();

        let (now_secs, _) = now_micros();
        for bucket in buckets {
            let bucket_path = self.root.join(&bucket);
            let mut empty = true;
            let entries = match fs::read_dir(&bucket_path) {
                Ok(it) => it,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(DirqError::io(&bucket_path, e)),
            };
            for entry in entries {
                let entry = entry.map_err(|e| DirqError::io(&bucket_path, e))?;
                let fname = match entry.file_name().into_string() {
                    Ok(s) => s,
                    Err(_) => {
                        empty = false;
                        continue;
                    }
                };
                let path = bucket_path.join(&fname);
                let age = match entry.metadata().and_then(|m| m.modified()) {
                    Ok(mtime) => now.duration_since(mtime).unwrap_or(Duration::ZERO),
                    // Entry vanished under us: a concurrent consumer won.
                    Err(_) => {
                        continue;
                    }
                };
                if let Some(stem) = fname.strip_suffix(TMP_SUFFIX) {
                    if is_hex_name(stem, 14) && age >= max_tmp_age && fs::remove_file(&path).is_ok()
                    {
                        report.tmp_removed += 1;
                        continue;
                    }
                    empty = false;
                } else if let Some(stem) = fname.strip_suffix(LOCK_SUFFIX) {
                    if is_hex_name(stem, 14) && age >= max_lock_age {
                        let dst = bucket_path.join(stem);
                        if fs::rename(&path, &dst).is_ok() {
                            report.locks_broken += 1;
                        }
                    }
                    empty = false;
                } else {
                    empty = false;
                }
            }
            // An empty bucket from a past time window cannot gain elements,
            // except under clock skew; a racing add recreates it anyway.
            if empty {
                if let Ok(bucket_secs) = u64::from_str_radix(&bucket, 16) {
                    if bucket_secs + self.granularity < now_secs {
                        let _ = fs::remove_dir(&bucket_path);
                    }
                }
            }
        }
        Ok(report)
    }

    fn element_path(&self, name: &ElementName) -> PathBuf {
        self.root.join(&name.dir).join(&name.file)
    }

    fn lock_path(&self, name: &ElementName) -> PathBuf {
        self.root.join(&name.dir).join(format!("{}{}", name.file, LOCK_SUFFIX))
    }
}

/// Counters reported by [`DirQueue::purge`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PurgeReport {
    pub tmp_removed: usize,
    pub locks_broken: usize,
}

/// Iterator over committed element names, oldest bucket first.
pub struct ElementIter {
    queue: DirQueue,
    /// Unvisited buckets, reverse-sorted so pop() yields oldest first.
    buckets: Vec<String>,
    /// Elements of the bucket being drained, reverse-sorted likewise.
    current: Vec<ElementName>,
}

impl Iterator for ElementIter {
    type Item = Result<ElementName, DirqError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(name) = self.current.pop() {
                return Some(Ok(name));
            }
            let bucket = self.buckets.pop()?;
            let bucket_path = self.queue.root.join(&bucket);
            let entries = match fs::read_dir(&bucket_path) {
                Ok(it) => it,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Some(Err(DirqError::io(&bucket_path, e))),
            };
            let mut files = Vec::new();
            for entry in entries {
                match entry {
                    Ok(entry) => {
                        if let Some(name) = entry.file_name().to_str() {
                            if is_hex_name(name, 14) {
                                files.push(ElementName {
                                    dir: bucket.clone(),
                                    file: name.to_string(),
                                });
                            }
                        }
                    }
                    Err(e) => return Some(Err(DirqError::io(&bucket_path, e))),
                }
            }
            files.sort();
            files.reverse();
            self.current = files;
        }
    }
}

/// Sibling path used as the poison queue for undecodable payloads.
pub fn poison_path_for(root: &Path) -> PathBuf {
    let mut os = root.as_os_str().to_os_string();
    os.push(".poison");
    PathBuf::from(os)
}

fn now_micros() -> (u64, u32) {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO);
    (now.as_secs(), now.subsec_micros())
}

/// Rename that fails with `AlreadyExists` instead of replacing `dst`.
///
/// Plain `rename(2)` silently replaces the destination; `renameat2` with
/// `RENAME_NOREPLACE` keeps lock acquisition a single atomic syscall.
#[cfg(target_os = "linux")]
fn rename_no_replace(src: &Path, dst: &Path) -> io::Result<()> {
    use std::os::unix::ffi::OsStrExt;
    let c_src = std::ffi::CString::new(src.as_os_str().as_bytes())?;
    let c_dst = std::ffi::CString::new(dst.as_os_str().as_bytes())?;
    let rc = unsafe {
        libc::renameat2(
            libc::AT_FDCWD,
            c_src.as_ptr(),
            libc::AT_FDCWD,
            c_dst.as_ptr(),
            libc::RENAME_NOREPLACE,
        )
    };
    if rc == 0 {
        Ok(())
    } else {
        let err = io::Error::last_os_error();
        // Some filesystems do not implement RENAME_NOREPLACE; with unique
        // element names the destination can only pre-exist through reuse of
        // a purged name, so plain rename is an acceptable fallback.
        if err.raw_os_error() == Some(libc::EINVAL) {
            fs::rename(src, dst)
        } else {
            Err(err)
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn rename_no_replace(src: &Path, dst: &Path) -> io::Result<()> {
    fs::rename(src, dst)
}
