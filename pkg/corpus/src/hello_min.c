/* Smallest positive entry: direct calls only, plus a dead halt so the
 * corpus covers every instruction category. */
#include "nolibc.h"

static volatile int never = 0;

void _start(void) {
    if (never) {
        __asm__ volatile ("hlt");
    }
    write_str("hello ");
    write_dec(14);
    write_str("\n");
    sys_exit(0);
}
