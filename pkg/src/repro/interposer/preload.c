/*
 * librrr_preload: entropy record-and-replay shim, activated via LD_PRELOAD.
 *
 * Interposes the dynamically resolved entropy entry points of a process:
 *   getrandom, open, open64, openat, openat64 (to spot /dev/urandom), read
 *   (on tracked descriptors), close (to untrack).
 *
 * Modes, selected by environment variables read once at load:
 *   RRR_MODE=off      every hook is a pure pass-through (default)
 *   RRR_MODE=record   forward to the real call, then append the served bytes
 *                     to <RRR_DIR>/urandom.conf or <RRR_DIR>/getrandom.conf
 *   RRR_MODE=replay   serve bytes from the profiles instead of the kernel;
 *                     each live request must match the recorded one
 *                     (source, requested length, flags) or it is a divergence
 *
 *   RRR_STRICT=abort|warn   divergence policy (default abort, exit code 3)
 *   RRR_LOG=path            diagnostics, plus one strace-style line per
 *                           intercepted request in record mode (this is the
 *                           fallback trace source when strace is unavailable)
 *   RRR_SOURCES=list        comma list of "urandom-read","getrandom"
 *                           (default: both)
 *
 * Profile format (must stay in lockstep with ../profile_store.py):
 *   header: "RRPF" | u16 version=1 | u8 source        (little-endian)
 *   record: u64 seq | u64 requested | u64 returned | u32 flags | payload
 *
 * Writes are one write(2) per record, so already-served entropy survives a
 * crash of the host process.  One global mutex serializes profile access;
 * if host threads race for entropy, request order can differ between record
 * and replay and strict matching will then report a divergence.
 *
 * A fork is detected by comparing getpid() against the pid captured at load:
 * the child of a recording process stops recording (one warning), the child
 * of a replaying process diverges.  An exec within the session is detected
 * via the RRR_OWNER marker variable and handled the same way, so an exec'd
 * image can never truncate profiles the original process is still writing.
 */

#define _GNU_SOURCE

#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <pthread.h>
#include <stdarg.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/types.h>
#include <unistd.h>

#define RRR_EXIT_DIVERGENCE 3
#define MAGIC "RRPF"
#define FORMAT_VERSION 1
#define HEADER_LEN 7
#define RECORD_HEADER_LEN 28

enum rrr_mode { MODE_OFF = 0, MODE_RECORD, MODE_REPLAY };
enum rrr_source { SRC_URANDOM = 0, SRC_GETRANDOM = 1, SRC_COUNT = 2 };

static const char *const SOURCE_FILE[SRC_COUNT] = { "urandom.conf", "getrandom.conf" };
static const char *const SOURCE_NAME[SRC_COUNT] = { "urandom-read", "getrandom" };
static const char *const SOURCE_CALL[SRC_COUNT] = { "read(/dev/urandom)", "getrandom" };

struct replay_record {
    uint64_t requested;
    uint64_t returned;
    uint32_t flags;
    const unsigned char *payload;
};

struct source_state {
    int active;
    /* record mode */
    int out_fd;
    uint64_t next_seq;
    /* replay mode */
    unsigned char *image;
    struct replay_record *records;
    uint64_t n_records;
    uint64_t cursor;
};

static ssize_t (*real_getrandom)(void *, size_t, unsigned int);
static int (*real_open)(const char *, int, ...);
static int (*real_open64)(const char *, int, ...);
static int (*real_openat)(int, const char *, int, ...);
static int (*real_openat64)(int, const char *, int, ...);
static ssize_t (*real_read)(int, void *, size_t);
static int (*real_close)(int);

static pthread_mutex_t g_lock = PTHREAD_MUTEX_INITIALIZER;
static pthread_once_t g_once = PTHREAD_ONCE_INIT;
static enum rrr_mode g_mode = MODE_OFF;
static int g_strict_abort = 1;
static int g_log_fd = -1;            /* -1: stderr */
static pid_t g_owner_pid;
static int g_fork_warned;
static char g_dir[4096];
static struct source_state g_src[SRC_COUNT];
/* bit per fd, fds 0..65535 */
static unsigned char g_tracked[8192];

/* ---------- tiny utilities (no hooked symbols, no allocation) ---------- */

static void put_u64le(unsigned char *p, uint64_t v)
{
    for (int i = 0; i < 8; i++)
        p[i] = (unsigned char)(v >> (8 * i));
}

static void put_u32le(unsigned char *p, uint32_t v)
{
    for (int i = 0; i < 4; i++)
        p[i] = (unsigned char)(v >> (8 * i));
}

static uint64_t get_u64le(const unsigned char *p)
{
    uint64_t v = 0;
    for (int i = 7; i >= 0; i--)
        v = (v << 8) | p[i];
    return v;
}

static uint32_t get_u32le(const unsigned char *p)
{
    uint32_t v = 0;
    for (int i = 3; i >= 0; i--)
        v = (v << 8) | p[i];
    return v;
}

static int write_full(int fd, const void *buf, size_t len)
{
    const unsigned char *p = buf;
    while (len > 0) {
        ssize_t n = write(fd, p, len);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            return -1;
        }
        p += n;
        len -= (size_t)n;
    }
    return 0;
}

static void logf_line(const char *fmt, ...)
{
    char buf[768];
    va_list ap;
    va_start(ap, fmt);
    int n = vsnprintf(buf, sizeof buf - 1, fmt, ap);
    va_end(ap);
    if (n < 0)
        return;
    if ((size_t)n >= sizeof buf - 1)
        n = sizeof buf - 2;
    buf[n] = '\n';
    write_full(g_log_fd >= 0 ? g_log_fd : 2, buf, (size_t)n + 1);
}

static void diag(const char *fmt, ...)
{
    char msg[640];
    va_list ap;
    va_start(ap, fmt);
    vsnprintf(msg, sizeof msg, fmt, ap);
    va_end(ap);
    logf_line("# rrr-preload: %s", msg);
}

__attribute__((noreturn)) static void fatal(const char *fmt, ...)
{
    char msg[640];
    va_list ap;
    va_start(ap, fmt);
    vsnprintf(msg, sizeof msg, fmt, ap);
    va_end(ap);
    logf_line("# rrr-preload: %s", msg);
    logf_line("# rrr-preload: aborting (exit %d)", RRR_EXIT_DIVERGENCE);
    _exit(RRR_EXIT_DIVERGENCE);
}

static int fd_is_tracked(int fd)
{
    if (fd < 0 || fd >= (int)(sizeof g_tracked * 8))
        return 0;
    return (g_tracked[fd >> 3] >> (fd & 7)) & 1;
}

static void fd_set_tracked(int fd, int on)
{
    if (fd < 0 || fd >= (int)(sizeof g_tracked * 8))
        return;
    if (on)
        g_tracked[fd >> 3] |= (unsigned char)(1 << (fd & 7));
    else
        g_tracked[fd >> 3] &= (unsigned char)~(1 << (fd & 7));
}

/* ---------- profile I/O ---------- */

static void profile_path(int si, char *out, size_t cap)
{
    snprintf(out, cap, "%s/%s", g_dir, SOURCE_FILE[si]);
}

static void record_open_profiles(void)
{
    for (int si = 0; si < SRC_COUNT; si++) {
        if (!g_src[si].active)
            continue;
        char path[4352];
        profile_path(si, path, sizeof path);
        int fd = real_open(path, O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd < 0)
            fatal("cannot create profile %s: %s", path, strerror(errno));
        unsigned char hdr[HEADER_LEN];
        memcpy(hdr, MAGIC, 4);
        hdr[4] = FORMAT_VERSION & 0xff;
        hdr[5] = FORMAT_VERSION >> 8;
        hdr[6] = (unsigned char)si;
        if (write_full(fd, hdr, sizeof hdr) < 0)
            fatal("cannot write profile header to %s: %s", path, strerror(errno));
        g_src[si].out_fd = fd;
    }
}

static void record_append(int si, uint64_t requested, uint32_t flags,
                          const void *payload, uint64_t returned)
{
    unsigned char hdr[RECORD_HEADER_LEN];
    put_u64le(hdr, g_src[si].next_seq);
    put_u64le(hdr + 8, requested);
    put_u64le(hdr + 16, returned);
    put_u32le(hdr + 24, flags);
    if (write_full(g_src[si].out_fd, hdr, sizeof hdr) < 0 ||
        write_full(g_src[si].out_fd, payload, returned) < 0) {
        char path[4352];
        profile_path(si, path, sizeof path);
        fatal("cannot append record to %s: %s", path, strerror(errno));
    }
    g_src[si].next_seq++;
}

static void replay_load_profile(int si)
{
    char path[4352];
    profile_path(si, path, sizeof path);

    int fd = real_open(path, O_RDONLY, 0);
    if (fd < 0) {
        if (errno == ENOENT)
            fatal("missing profile %s (replay mode needs a recorded profile)", path);
        fatal("cannot open profile %s: %s", path, strerror(errno));
    }
    struct stat st;
    if (fstat(fd, &st) < 0)
        fatal("cannot stat profile %s: %s", path, strerror(errno));
    size_t size = (size_t)st.st_size;
    unsigned char *image = malloc(size ? size : 1);
    if (!image)
        fatal("out of memory loading profile %s (%zu bytes)", path, size);
    size_t got = 0;
    while (got < size) {
        ssize_t n = real_read(fd, image + got, size - got);
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            fatal("cannot read profile %s: %s", path, strerror(errno));
        got += (size_t)n;
    }
    real_close(fd);

    if (size < HEADER_LEN)
        fatal("corrupt profile %s: too short for header", path);
    if (memcmp(image, MAGIC, 4) != 0)
        fatal("corrupt profile %s: bad magic", path);
    unsigned version = image[4] | ((unsigned)image[5] << 8);
    if (version != FORMAT_VERSION)
        fatal("corrupt profile %s: unsupported format version %u", path, version);
    if (image[6] != (unsigned char)si)
        fatal("corrupt profile %s: source byte %u does not match file", path, image[6]);

    /* first pass: count and validate framing */
    uint64_t count = 0;
    size_t off = HEADER_LEN;
    while (off < size) {
        if (size - off < RECORD_HEADER_LEN)
            fatal("corrupt profile %s: truncated record header at offset %zu", path, off);
        uint64_t seq = get_u64le(image + off);
        uint64_t requested = get_u64le(image + off + 8);
        uint64_t returned = get_u64le(image + off + 16);
        if (seq != count)
            fatal("corrupt profile %s: record %llu carries seq %llu", path,
                  (unsigned long long)count, (unsigned long long)seq);
        if (returned > requested)
            fatal("corrupt profile %s: record %llu returned_len exceeds requested_len",
                  path, (unsigned long long)count);
        if (size - off - RECORD_HEADER_LEN < returned)
            fatal("corrupt profile %s: truncated record payload at offset %zu", path, off);
        off += RECORD_HEADER_LEN + returned;
        count++;
    }

    struct replay_record *records = NULL;
    if (count > 0) {
        records = calloc(count, sizeof *records);
        if (!records)
            fatal("out of memory indexing profile %s", path);
        off = HEADER_LEN;
        for (uint64_t i = 0; i < count; i++) {
            records[i].requested = get_u64le(image + off + 8);
            records[i].returned = get_u64le(image + off + 16);
            records[i].flags = get_u32le(image + off + 24);
            records[i].payload = image + off + RECORD_HEADER_LEN;
            off += RECORD_HEADER_LEN + records[i].returned;
        }
    }
    g_src[si].image = image;
    g_src[si].records = records;
    g_src[si].n_records = count;
    g_src[si].cursor = 0;
}

/* ---------- divergence handling ---------- */

/* Called with g_lock held.  Returns only in warn mode. */
static void divergence(int si, uint64_t live_len, uint32_t live_flags)
{
    struct source_state *s = &g_src[si];
    char msg[512];
    if (s->cursor >= s->n_records) {
        snprintf(msg, sizeof msg,
                 "replay divergence on %s: profile exhausted after %llu records "
                 "but live request is (requested_len=%llu flags=0x%x)",
                 SOURCE_CALL[si], (unsigned long long)s->n_records,
                 (unsigned long long)live_len, live_flags);
    } else {
        const struct replay_record *r = &s->records[s->cursor];
        snprintf(msg, sizeof msg,
                 "replay divergence on %s: recorded request seq=%llu "
                 "(requested_len=%llu flags=0x%x) but live request is "
                 "(requested_len=%llu flags=0x%x)",
                 SOURCE_CALL[si], (unsigned long long)s->cursor,
                 (unsigned long long)r->requested, r->flags,
                 (unsigned long long)live_len, live_flags);
    }
    if (g_strict_abort)
        fatal("%s", msg);
    diag("%s; falling through to the real call", msg);
}

/* Fork handling: the child of a recording process must not interleave its
 * requests into the parent's profile; the child of a replaying process has
 * no recorded stream of its own.  Returns the mode the caller should apply
 * (MODE_OFF = pass through). */
static enum rrr_mode fork_check(void)
{
    if (getpid() == g_owner_pid)
        return g_mode;
    if (g_mode == MODE_REPLAY) {
        if (g_strict_abort)
            fatal("fork detected (pid %d, profile owner %d): a forked child "
                  "cannot replay its parent's profile", (int)getpid(), (int)g_owner_pid);
        /* fall through to pass-through below, with one warning */
    }
    if (!g_fork_warned) {
        g_fork_warned = 1;
        diag("fork detected (pid %d, profile owner %d): interposition disabled "
             "in the child", (int)getpid(), (int)g_owner_pid);
    }
    g_mode = MODE_OFF;   /* copy-on-write: affects this process only */
    return MODE_OFF;
}

/* ---------- initialization ---------- */

static void resolve_real(void)
{
    real_getrandom = (ssize_t (*)(void *, size_t, unsigned int))dlsym(RTLD_NEXT, "getrandom");
    real_open = (int (*)(const char *, int, ...))dlsym(RTLD_NEXT, "open");
    real_open64 = (int (*)(const char *, int, ...))dlsym(RTLD_NEXT, "open64");
    real_openat = (int (*)(int, const char *, int, ...))dlsym(RTLD_NEXT, "openat");
    real_openat64 = (int (*)(int, const char *, int, ...))dlsym(RTLD_NEXT, "openat64");
    real_read = (ssize_t (*)(int, void *, size_t))dlsym(RTLD_NEXT, "read");
    real_close = (int (*)(int))dlsym(RTLD_NEXT, "close");
}

static void parse_sources(const char *names)
{
    if (!names) {
        g_src[SRC_URANDOM].active = 1;
        g_src[SRC_GETRANDOM].active = 1;
        return;
    }
    char buf[256];
    snprintf(buf, sizeof buf, "%s", names);
    char *save = NULL;
    for (char *tok = strtok_r(buf, ",", &save); tok; tok = strtok_r(NULL, ",", &save)) {
        while (*tok == ' ')
            tok++;
        if (!*tok)
            continue;
        if (strcmp(tok, SOURCE_NAME[SRC_URANDOM]) == 0)
            g_src[SRC_URANDOM].active = 1;
        else if (strcmp(tok, SOURCE_NAME[SRC_GETRANDOM]) == 0)
            g_src[SRC_GETRANDOM].active = 1;
        else
            fatal("unknown source %.64s in RRR_SOURCES (known: urandom-read, getrandom)", tok);
    }
}

static void rrr_init_once(void)
{
    resolve_real();
    g_owner_pid = getpid();

    const char *log_path = getenv("RRR_LOG");
    if (log_path && *log_path) {
        int fd = real_open(log_path, O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (fd >= 0)
            g_log_fd = fd;
        else
            diag("cannot open RRR_LOG %s: %s (logging to stderr)", log_path, strerror(errno));
    }

    const char *mode = getenv("RRR_MODE");
    if (!mode || !*mode || strcmp(mode, "off") == 0) {
        g_mode = MODE_OFF;
        return;
    }
    if (strcmp(mode, "record") == 0)
        g_mode = MODE_RECORD;
    else if (strcmp(mode, "replay") == 0)
        g_mode = MODE_REPLAY;
    else
        fatal("unknown RRR_MODE '%.32s' (expected record, replay or off)", mode);

    const char *strict = getenv("RRR_STRICT");
    if (!strict || !*strict || strcmp(strict, "abort") == 0)
        g_strict_abort = 1;
    else if (strcmp(strict, "warn") == 0)
        g_strict_abort = 0;
    else
        fatal("unknown RRR_STRICT '%.32s' (expected abort or warn)", strict);

    const char *dir = getenv("RRR_DIR");
    if (!dir || !*dir)
        fatal("RRR_DIR is required when RRR_MODE=%s", mode);
    snprintf(g_dir, sizeof g_dir, "%s", dir);

    parse_sources(getenv("RRR_SOURCES"));

    /* Exec within the session: the marker carries the pid of the process this
     * session's profiles belong to.  A fresh image must never truncate or
     * re-consume them. */
    const char *owner = getenv("RRR_OWNER");
    if (owner && *owner) {
        if (g_mode == MODE_REPLAY && g_strict_abort)
            fatal("exec detected inside a replay session (owner marker %.32s, "
                  "pid %d): the exec'd image has no stream position", owner, (int)getpid());
        diag("exec detected inside a session (owner marker %.32s, pid %d): "
             "interposition disabled in this image", owner, (int)getpid());
        g_mode = MODE_OFF;
        return;
    }
    char pidstr[32];
    snprintf(pidstr, sizeof pidstr, "%d", (int)g_owner_pid);
    setenv("RRR_OWNER", pidstr, 1);

    if (g_mode == MODE_RECORD)
        record_open_profiles();
    else
        for (int si = 0; si < SRC_COUNT; si++)
            if (g_src[si].active)
                replay_load_profile(si);
}

static void rrr_ensure_init(void)
{
    pthread_once(&g_once, rrr_init_once);
}

__attribute__((constructor)) static void rrr_ctor(void)
{
    rrr_ensure_init();
}

/* ---------- hooked entropy paths ---------- */

ssize_t getrandom(void *buf, size_t buflen, unsigned int flags)
{
    rrr_ensure_init();
    if (!real_getrandom) {
        errno = ENOSYS;
        return -1;
    }
    if (g_mode == MODE_OFF || !g_src[SRC_GETRANDOM].active ||
        fork_check() == MODE_OFF)
        return real_getrandom(buf, buflen, flags);

    pthread_mutex_lock(&g_lock);
    if (g_mode == MODE_RECORD) {
        ssize_t n = real_getrandom(buf, buflen, flags);
        int saved = errno;
        if (n >= 0) {
            record_append(SRC_GETRANDOM, buflen, flags, buf, (uint64_t)n);
            if (g_log_fd >= 0)
                logf_line("getrandom(\"...\", %zu, %u) = %zd", buflen, flags, n);
        }
        pthread_mutex_unlock(&g_lock);
        errno = saved;
        return n;
    }
    /* replay */
    struct source_state *s = &g_src[SRC_GETRANDOM];
    if (s->cursor < s->n_records &&
        s->records[s->cursor].requested == (uint64_t)buflen &&
        s->records[s->cursor].flags == (uint32_t)flags) {
        const struct replay_record *r = &s->records[s->cursor];
        memcpy(buf, r->payload, r->returned);
        ssize_t n = (ssize_t)r->returned;
        s->cursor++;
        pthread_mutex_unlock(&g_lock);
        return n;
    }
    divergence(SRC_GETRANDOM, (uint64_t)buflen, (uint32_t)flags);
    pthread_mutex_unlock(&g_lock);
    return real_getrandom(buf, buflen, flags);
}

ssize_t read(int fd, void *buf, size_t count)
{
    rrr_ensure_init();
    if (g_mode == MODE_OFF || !g_src[SRC_URANDOM].active || !fd_is_tracked(fd) ||
        fork_check() == MODE_OFF)
        return real_read(fd, buf, count);

    pthread_mutex_lock(&g_lock);
    if (g_mode == MODE_RECORD) {
        ssize_t n = real_read(fd, buf, count);
        int saved = errno;
        if (n >= 0) {
            record_append(SRC_URANDOM, count, 0, buf, (uint64_t)n);
            if (g_log_fd >= 0)
                logf_line("read(%d</dev/urandom>, \"...\", %zu) = %zd", fd, count, n);
        }
        pthread_mutex_unlock(&g_lock);
        errno = saved;
        return n;
    }
    /* replay */
    struct source_state *s = &g_src[SRC_URANDOM];
    if (s->cursor < s->n_records &&
        s->records[s->cursor].requested == (uint64_t)count &&
        s->records[s->cursor].flags == 0) {
        const struct replay_record *r = &s->records[s->cursor];
        memcpy(buf, r->payload, r->returned);
        ssize_t n = (ssize_t)r->returned;
        s->cursor++;
        pthread_mutex_unlock(&g_lock);
        return n;
    }
    divergence(SRC_URANDOM, (uint64_t)count, 0);
    pthread_mutex_unlock(&g_lock);
    return real_read(fd, buf, count);
}

/* ---------- descriptor bookkeeping ---------- */

static int path_is_urandom(const char *path, int fd)
{
    if (path && strcmp(path, "/dev/urandom") == 0)
        return 1;
    struct stat st;
    if (fstat(fd, &st) == 0 && S_ISCHR(st.st_mode) &&
        major(st.st_rdev) == 1 && minor(st.st_rdev) == 9)
        return 1;
    return 0;
}

static int after_open(const char *variant, const char *path, int flags, int fd)
{
    if (fd < 0 || g_mode == MODE_OFF || !g_src[SRC_URANDOM].active)
        return fd;
    int saved = errno;
    if (path_is_urandom(path, fd)) {
        pthread_mutex_lock(&g_lock);
        fd_set_tracked(fd, 1);
        if (g_mode == MODE_RECORD && g_log_fd >= 0)
            logf_line("%s(\"%s\", 0x%x) = %d", variant, path ? path : "?", flags, fd);
        pthread_mutex_unlock(&g_lock);
    }
    errno = saved;
    return fd;
}

#define EXTRACT_MODE(last_arg)                                                \
    mode_t mode = 0;                                                          \
    if ((flags & O_CREAT) || ((flags & O_TMPFILE) == O_TMPFILE)) {            \
        va_list ap;                                                           \
        va_start(ap, last_arg);                                               \
        mode = va_arg(ap, mode_t);                                            \
        va_end(ap);                                                           \
    }

int open(const char *path, int flags, ...)
{
    EXTRACT_MODE(flags);
    rrr_ensure_init();
    int fd = real_open(path, flags, mode);
    return after_open("open", path, flags, fd);
}

int open64(const char *path, int flags, ...)
{
    EXTRACT_MODE(flags);
    rrr_ensure_init();
    int fd = real_open64(path, flags, mode);
    return after_open("open64", path, flags, fd);
}

int openat(int dirfd, const char *path, int flags, ...)
{
    EXTRACT_MODE(flags);
    rrr_ensure_init();
    int fd = real_openat(dirfd, path, flags, mode);
    return after_open("openat", path, flags, fd);
}

int openat64(int dirfd, const char *path, int flags, ...)
{
    EXTRACT_MODE(flags);
    rrr_ensure_init();
    int fd = real_openat64(dirfd, path, flags, mode);
    return after_open("openat64", path, flags, fd);
}

int close(int fd)
{
    rrr_ensure_init();
    if (g_mode == MODE_OFF)
        return real_close(fd);
    int r = real_close(fd);
    int saved = errno;
    if (fd_is_tracked(fd)) {
        pthread_mutex_lock(&g_lock);
        fd_set_tracked(fd, 0);
        if (g_mode == MODE_RECORD && g_log_fd >= 0)
            logf_line("close(%d</dev/urandom>) = %d", fd, r);
        pthread_mutex_unlock(&g_lock);
    }
    errno = saved;
    return r;
}
