//! Thin wrappers over the host memory-management interfaces.

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::Mutex;

use crate::domain::{AccessMode, DomainError, PAGE_SIZE};

pub(crate) fn mmap_anon(len: usize) -> io::Result<usize> {
    // SAFETY: anonymous private mapping, no existing memory is touched.
    let ptr = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        Err(io::Error::last_os_error())
    } else {
        Ok(ptr as usize)
    }
}

/// # Safety
/// `[addr, addr+len)` must be a mapping obtained from [`mmap_anon`] that is
/// no longer referenced.
pub(crate) unsafe fn munmap(addr: usize, len: usize) -> io::Result<()> {
    if libc::munmap(addr as *mut libc::c_void, len) == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

pub(crate) fn prot_for(mode: AccessMode) -> libc::c_int {
    match mode {
        AccessMode::None => libc::PROT_NONE,
        AccessMode::ReadOnly => libc::PROT_READ,
        AccessMode::ReadWrite => libc::PROT_READ | libc::PROT_WRITE,
    }
}

pub(crate) fn mprotect(addr: usize, len: usize, prot: libc::c_int) -> io::Result<()> {
    // SAFETY: callers only pass pool mappings they own.
    if unsafe { libc::mprotect(addr as *mut libc::c_void, len, prot) } == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub(crate) mod pkey {
    use std::io;

    pub const PKEY_DISABLE_ACCESS: libc::c_ulong = 0x1;

    pub fn alloc(rights: libc::c_ulong) -> io::Result<u8> {
        // SAFETY: plain syscall, no memory arguments.
        let key = unsafe { libc::syscall(libc::SYS_pkey_alloc, 0 as libc::c_ulong, rights) };
        if key < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(key as u8)
        }
    }

    pub fn free(key: u8) -> io::Result<()> {
        // SAFETY: plain syscall, no memory arguments.
        let rc = unsafe { libc::syscall(libc::SYS_pkey_free, libc::c_ulong::from(key)) };
        if rc < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(())
        }
    }

    pub fn mprotect(addr: usize, len: usize, prot: libc::c_int, key: u8) -> io::Result<()> {
        // SAFETY: callers only pass pool mappings they own.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_pkey_mprotect,
                addr as libc::c_ulong,
                len as libc::size_t,
                prot as libc::c_ulong,
                libc::c_ulong::from(key),
            )
        };
        if rc < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(())
        }
    }

    pub fn rdpkru() -> u32 {
        let pkru: u32;
        // SAFETY: RDPKRU only reads the calling thread's PKRU; requires ECX=0.
        unsafe {
            std::arch::asm!(
                "rdpkru",
                in("ecx") 0,
                out("eax") pkru,
                out("edx") _,
                options(nomem, nostack, preserves_flags),
            );
        }
        pkru
    }

    /// # Safety
    /// Revoking access to memory that live Rust references point into turns
    /// later dereferences into faults.
    pub unsafe fn wrpkru(pkru: u32) {
        std::arch::asm!(
            "wrpkru",
            in("eax") pkru,
            in("ecx") 0,
            in("edx") 0,
            options(nostack, preserves_flags),
        );
    }

    /// CPUID.(EAX=7,ECX=0):ECX bit 4 (OSPKE): the OS has enabled PKRU.
    fn os_enabled() -> bool {
        let leaf = std::arch::x86_64::__cpuid_count(7, 0);
        leaf.ecx & (1 << 4) != 0
    }

    /// True if the host hands out protection keys to this process.
    pub fn available() -> bool {
        if !os_enabled() {
            return false;
        }
        match alloc(0) {
            Ok(k) => {
                let _ = free(k);
                true
            }
            Err(_) => false,
        }
    }
}

/// Moves bytes between user memory and a pipe so the kernel, not the CPU
/// fault path, checks page permissions. A denied copy comes back as `EFAULT`
/// instead of a signal.
#[derive(Debug)]
pub(crate) struct KernelProbe {
    pipe: Mutex<(OwnedFd, OwnedFd)>,
}

impl KernelProbe {
    pub fn new() -> io::Result<Self> {
        let mut fds = [0; 2];
        // SAFETY: fds has room for two descriptors.
        if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: pipe2 returned two fresh descriptors we now own.
        let pair = unsafe { (OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) };
        Ok(KernelProbe {
            pipe: Mutex::new(pair),
        })
    }

    /// Copies `dst.len()` bytes from address `src`. `Ok(false)` means the
    /// host denied the read.
    pub fn load(&self, src: usize, dst: &mut [u8]) -> Result<bool, DomainError> {
        let pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        let (rfd, wfd) = (pipe.0.as_raw_fd(), pipe.1.as_raw_fd());
        for (i, chunk) in dst.chunks_mut(PAGE_SIZE).enumerate() {
            let addr = src + i * PAGE_SIZE;
            // SAFETY: the kernel validates the source range; faults become EFAULT.
            let n = unsafe { libc::write(wfd, addr as *const libc::c_void, chunk.len()) };
            if n < 0 {
                return fault_or_error();
            }
            let n = n as usize;
            read_exact(rfd, &mut chunk[..n])?;
            if n < chunk.len() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Copies `src` to address `dst`. `Ok(false)` means the host denied the
    /// write; nothing was stored in that case.
    pub fn store(&self, dst: usize, src: &[u8]) -> Result<bool, DomainError> {
        let pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        let (rfd, wfd) = (pipe.0.as_raw_fd(), pipe.1.as_raw_fd());
        for (i, chunk) in src.chunks(PAGE_SIZE).enumerate() {
            let addr = dst + i * PAGE_SIZE;
            // SAFETY: chunk is ordinary readable memory.
            let n = unsafe { libc::write(wfd, chunk.as_ptr().cast(), chunk.len()) };
            if n != chunk.len() as isize {
                return Err(DomainError::Backend(format!(
                    "probe pipe write: {}",
                    io::Error::last_os_error()
                )));
            }
            // SAFETY: the kernel validates the destination; faults become EFAULT.
            let got = unsafe { libc::read(rfd, addr as *mut libc::c_void, chunk.len()) };
            if got < 0 {
                let err = io::Error::last_os_error();
                drain(rfd, chunk.len())?;
                return if err.raw_os_error() == Some(libc::EFAULT) {
                    Ok(false)
                } else {
                    Err(DomainError::Backend(format!("probe pipe read: {err}")))
                };
            }
            if (got as usize) < chunk.len() {
                drain(rfd, chunk.len() - got as usize)?;
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn fault_or_error() -> Result<bool, DomainError> {
    let err = io::Error::last_os_error();
    if err.raw_os_error() == Some(libc::EFAULT) {
        Ok(false)
    } else {
        Err(DomainError::Backend(format!("probe pipe write: {err}")))
    }
}

fn read_exact(fd: libc::c_int, buf: &mut [u8]) -> Result<(), DomainError> {
    let mut done = 0;
    while done < buf.len() {
        // SAFETY: buf is ordinary writable memory.
        let n = unsafe { libc::read(fd, buf[done..].as_mut_ptr().cast(), buf.len() - done) };
        if n <= 0 {
            return Err(DomainError::Backend(format!(
                "probe pipe read: {}",
                io::Error::last_os_error()
            )));
        }
        done += n as usize;
    }
    Ok(())
}

fn drain(fd: libc::c_int, len: usize) -> Result<(), DomainError> {
    let mut scratch = vec![0u8; len];
    read_exact(fd, &mut scratch)
}
