/*
 * Injected runtime for rewritten binaries.
 *
 * Compiled freestanding and linked into a flat position-independent blob
 * (no relocations, no GOT, no bss) that the rewriter embeds in the new
 * executable segment.  The entry shim runs before anything else in the
 * process, so it must preserve the registers the ABI hands to _start
 * (rsp and the rdx atexit hook).
 *
 * Responsibilities:
 *   - compute the load slide and, for position-independent executables,
 *     materialize the region table at its fixed virtual address with
 *     slid absolute fields;
 *   - set up the shadow-stack state page (top pointer, guard page);
 *   - install the SIGSEGV handler on an alternate stack;
 *   - jump to the translated original entry point.
 *
 * The handler redirects execution faults in the revoked original text
 * through the address mapping, grows the shadow stack on guard-page
 * faults, reports enforcement violations signalled through the
 * diagnostic gate page, and re-raises anything else unchanged.
 *
 * Exit diagnostics (also documented in the top-level README):
 *   96  control-flow violation (untranslatable target)
 *   97  shadow-stack mismatch
 *   98  runtime initialization failure
 *   99  shadow-stack overflow beyond the growth cap
 */

typedef unsigned long u64;
typedef unsigned int u32;
typedef long i64;

#define PARAM_MAGIC 0x3230303042505452UL /* "RTPB0002" little-endian */

#define DIAG_GATE_BASE    0x56790000UL
#define DIAG_GATE_SHADOW  (DIAG_GATE_BASE + 1)
#define DIAG_GATE_IBV     (DIAG_GATE_BASE + 2)

#define EXIT_CF_VIOLATION 96
#define EXIT_SHADOW_MISMATCH 97
#define EXIT_INIT_FAILURE 98
#define EXIT_SHADOW_OVERFLOW 99

#define FLAG_HAVE_STATE 1UL

#define SENTINEL 0xFFFFFFFFu

#define PROT_READ 1
#define PROT_WRITE 2
#define MAP_PRIVATE 0x02
#define MAP_FIXED 0x10
#define MAP_ANONYMOUS 0x20

#define SA_SIGINFO 4UL
#define SA_RESTORER 0x04000000UL
#define SA_ONSTACK 0x08000000UL

#define SYS_write 1
#define SYS_mmap 9
#define SYS_mprotect 10
#define SYS_rt_sigaction 13
#define SYS_rt_sigreturn 15
#define SYS_sigaltstack 131
#define SYS_exit_group 231

#define SHADOW_GROW_CAP (16UL << 20)

struct params {
    u64 magic;
    u64 blob_vaddr;
    u64 entry_vaddr;
    u64 table_vaddr;
    u64 table_size;
    u64 fixed_table_addr;
    u64 old_text_vaddr;
    u64 old_text_size;
    u64 new_base;
    u64 mapping_array_vaddr;
    u64 state_vaddr;
    u64 state_size;
    u64 flags;
    u64 region_count;
    u64 stub_base; /* enforcement halts (hlt) live between here and new_base */
};

/* Patched by the emitter; the magic makes the block findable. */
static volatile struct params params
    __attribute__((section(".data.params"), aligned(8), used)) = {
    .magic = PARAM_MAGIC,
};

void blob_entry(void);

/* The blob lives in a read-execute segment, so mutable runtime state
 * sits in the writable state page instead: the shadow top pointer is at
 * +0 and this block at +8 (storage starts at +64). */
struct runtime_state {
    u64 guard;       /* current guard page base, 0 when growth exhausted */
    u64 grow_limit;  /* first byte that may never become shadow storage */
    u64 initialized;
};

static inline u64 get_slide(void) {
    return (u64)&blob_entry - params.blob_vaddr;
}

static inline volatile struct runtime_state *rt_state(u64 slide) {
    return (volatile struct runtime_state *)(params.state_vaddr + slide + 8);
}

/* ------------------------------------------------------------------ */
/* raw syscalls                                                        */
/* ------------------------------------------------------------------ */

static inline i64 sys3(i64 n, u64 a, u64 b, u64 c) {
    i64 ret;
    __asm__ volatile("syscall"
                     : "=a"(ret)
                     : "a"(n), "D"(a), "S"(b), "d"(c)
                     : "rcx", "r11", "memory");
    return ret;
}

static inline i64 sys6(i64 n, u64 a, u64 b, u64 c, u64 d, u64 e, u64 f) {
    i64 ret;
    register u64 r10 __asm__("r10") = d;
    register u64 r8 __asm__("r8") = e;
    register u64 r9 __asm__("r9") = f;
    __asm__ volatile("syscall"
                     : "=a"(ret)
                     : "a"(n), "D"(a), "S"(b), "d"(c), "r"(r10), "r"(r8),
                       "r"(r9)
                     : "rcx", "r11", "memory");
    return ret;
}

static void die(int code, const char *msg) {
    u64 len = 0;
    while (msg[len])
        len++;
    sys3(SYS_write, 2, (u64)msg, len);
    sys3(SYS_exit_group, (u64)code, 0, 0);
    __builtin_unreachable();
}

static void copy_bytes(volatile unsigned char *dst,
                       const unsigned char *src, u64 n) {
    for (u64 i = 0; i < n; i++)
        dst[i] = src[i];
}

/* ------------------------------------------------------------------ */
/* kernel signal plumbing (no libc, so the structs live here)          */
/* ------------------------------------------------------------------ */

struct kernel_sigaction {
    void *handler;
    u64 flags;
    void *restorer;
    u64 mask;
};

struct stack_t_k {
    void *ss_sp;
    int ss_flags;
    u64 ss_size;
};

/* offsetof(siginfo_t, si_addr) and the sigcontext register block inside
 * struct ucontext on x86-64 Linux */
#define SI_ADDR_OFFSET 16
#define UC_MCONTEXT_GREGS 40
#define GREG_RIP 16
#define GREG_SLOTS 23

__attribute__((naked)) static void sig_restorer(void) {
    __asm__ volatile("mov $15, %rax\n\t" /* rt_sigreturn */
                     "syscall");
}

/* ------------------------------------------------------------------ */
/* address translation (mirrors the generated local lookup)            */
/* ------------------------------------------------------------------ */

static u64 translate(u64 addr, u64 slide) {
    u64 old_lo = params.old_text_vaddr + slide;
    if (addr < old_lo || addr - old_lo >= params.old_text_size)
        return 0;
    const u32 *table = (const u32 *)(params.mapping_array_vaddr + slide);
    u32 entry = table[addr - old_lo];
    if (entry == SENTINEL)
        return 0;
    return params.new_base + slide + entry;
}

static void sigsegv_handler(int sig, void *info, void *uctx) {
    (void)sig;
    u64 addr = *(u64 *)((char *)info + SI_ADDR_OFFSET);
    u64 *gregs = (u64 *)((char *)uctx + UC_MCONTEXT_GREGS);
    u64 rip = gregs[GREG_RIP];
    u64 slide = get_slide();
    volatile struct runtime_state *rs = rt_state(slide);

    if (addr >= DIAG_GATE_BASE && addr < DIAG_GATE_BASE + 0x1000) {
        if (addr == DIAG_GATE_SHADOW)
            die(EXIT_SHADOW_MISMATCH, "shadow-stack mismatch: halting\n");
        if (addr == DIAG_GATE_IBV)
            die(EXIT_CF_VIOLATION, "indirect-branch violation: halting\n");
        die(EXIT_CF_VIOLATION, "enforcement violation: halting\n");
    }

    if (rs->guard && addr >= rs->guard && addr < rs->guard + 0x1000) {
        /* shadow stack hit the guard page: commit it, move the guard */
        u64 guard = rs->guard;
        u64 next = guard + 0x1000;
        if (next + 0x1000 > rs->grow_limit) {
            die(EXIT_SHADOW_OVERFLOW,
                "shadow stack exceeded its growth cap: halting\n");
        }
        if (sys3(SYS_mprotect, guard, 0x1000, PROT_READ | PROT_WRITE) < 0 ||
            (i64)sys6(SYS_mmap, next, 0x1000, 0,
                      MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, (u64)-1,
                      0) < 0) {
            die(EXIT_SHADOW_OVERFLOW, "shadow stack growth failed\n");
        }
        rs->guard = next;
        return;
    }

    /* A hlt inside the stub area is the mapping's sentinel/failure
     * path: the lookup refused an indirect target. */
    if (rip >= params.stub_base + slide && rip < params.new_base + slide &&
        *(const unsigned char *)rip == 0xF4) {
        die(EXIT_CF_VIOLATION,
            "indirect transfer to an illegal target: halting\n");
    }

    u64 old_lo = params.old_text_vaddr + slide;
    if (rip == addr && addr >= old_lo &&
        addr - old_lo < params.old_text_size) {
        u64 target = translate(addr, slide);
        if (!target) {
            die(EXIT_CF_VIOLATION,
                "jump into an untranslatable original address: halting\n");
        }
        gregs[GREG_RIP] = target;
        return; /* sigreturn resumes at the rewritten location */
    }

    /* Not ours: restore the default disposition and re-raise by
     * returning; the faulting instruction runs again and kills the
     * process the normal way. */
    struct kernel_sigaction dfl = {0};
    dfl.flags = SA_RESTORER;
    dfl.restorer = (void *)sig_restorer;
    sys6(SYS_rt_sigaction, 11 /* SIGSEGV */, (u64)&dfl, 0, 8, 0, 0);
}

/* ------------------------------------------------------------------ */
/* startup                                                             */
/* ------------------------------------------------------------------ */

static void relocate_region_table(u64 slide) {
    u64 src = params.table_vaddr + slide;
    u64 size = params.table_size;
    u64 dst = params.fixed_table_addr;

    i64 page = sys6(SYS_mmap, dst, (size + 0xFFF) & ~0xFFFUL,
                    PROT_READ | PROT_WRITE,
                    MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, (u64)-1, 0);
    if (page != (i64)dst)
        die(EXIT_INIT_FAILURE, "cannot map the fixed lookup table page\n");

    copy_bytes((volatile unsigned char *)dst, (const unsigned char *)src,
               size);

    volatile u64 *t = (volatile u64 *)dst;
    u64 count = t[0];
    t[1] += slide; /* global lookup address */
    for (u64 i = 0; i < count; i++) {
        volatile u64 *entry = t + 3 + i * 3;
        if (entry[0]) { /* instrumented region: slide its fields */
            entry[0] += slide;
            entry[1] += slide;
        }
    }

    sys3(SYS_mprotect, dst, (size + 0xFFF) & ~0xFFFUL, PROT_READ);
}

u64 runtime_init(void) {
    /* The entry shim is linked at blob offset 0, so its runtime address
     * minus the recorded blob vaddr is the load slide. */
    u64 slide = get_slide();
    volatile struct runtime_state *rs = rt_state(slide);
    if (rs->initialized)
        return params.entry_vaddr + slide;

    if (slide)
        relocate_region_table(slide);

    {
        u64 lo = params.state_vaddr + slide;
        if (slide) /* re-anchor the shadow top pointer */
            *(volatile u64 *)lo = lo + 64;
        u64 guard = lo + params.state_size - 0x1000;
        if (sys3(SYS_mprotect, guard, 0x1000, 0) == 0) {
            rs->guard = guard;
            u64 limit = lo + params.state_size + SHADOW_GROW_CAP;
            u64 table_above = params.table_vaddr + slide;
            if (table_above > lo && table_above - 0x1000 < limit)
                limit = table_above - 0x1000;
            rs->grow_limit = limit;
        }
    }

    i64 alt = sys6(SYS_mmap, 0, 0x10000, PROT_READ | PROT_WRITE,
                   MAP_PRIVATE | MAP_ANONYMOUS, (u64)-1, 0);
    if (alt < 0)
        die(EXIT_INIT_FAILURE, "cannot allocate the signal stack\n");
    struct stack_t_k ss = {(void *)alt, 0, 0x10000};
    if (sys3(SYS_sigaltstack, (u64)&ss, 0, 0) < 0)
        die(EXIT_INIT_FAILURE, "sigaltstack failed\n");

    struct kernel_sigaction sa = {0};
    sa.handler = (void *)sigsegv_handler;
    sa.flags = SA_SIGINFO | SA_ONSTACK | SA_RESTORER;
    sa.restorer = (void *)sig_restorer;
    if (sys6(SYS_rt_sigaction, 11, (u64)&sa, 0, 8, 0, 0) < 0)
        die(EXIT_INIT_FAILURE, "cannot install the fault handler\n");

    rs->initialized = 1;
    return params.entry_vaddr + slide;
}

/* Blob offset 0: preserve rdx (atexit hook), call init, jump onward. */
__attribute__((naked, section(".text.entry"))) void blob_entry(void) {
    __asm__ volatile(
        "push %rdx\n\t"
        "sub $8, %rsp\n\t"
        "call runtime_init\n\t"
        "add $8, %rsp\n\t"
        "pop %rdx\n\t"
        "jmp *%rax");
}
