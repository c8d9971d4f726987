/* Indirect jump to a plain label: no endbr64 landing pad.  Runs fine on
 * non-enforcing hardware; an enforcing rewrite must refuse the target. */
#include "nolibc.h"

void _start(void) {
    write_str("before\n");
    __asm__ volatile (
        "lea 1f(%%rip), %%rax\n\t"
        "jmp *%%rax\n\t"
        "1:\n\t"
        ::: "rax");
    write_str("after\n");
    sys_exit(0);
}
