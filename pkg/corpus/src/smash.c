/* ROP-style overwrite of a saved return address.  The hijack works
 * natively; a shadow-stack rewrite must halt at the mismatch. */
#include "nolibc.h"

static void hijack_target(void) {
    write_str("hijacked\n");
    sys_exit(7);
}

static __attribute__((noinline)) long victim(unsigned long nv) {
    __asm__ volatile ("movq %0, (%%rsp)" :: "r"(nv) : "memory");
    return 1;
}

void _start(void) {
    write_str("calling\n");
    victim((unsigned long)hijack_target);
    write_str("returned\n");
    sys_exit(0);
}
