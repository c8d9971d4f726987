/* Call/return depth well past one page of 8-byte shadow entries. */
#include "nolibc.h"

static long bounce(long n) {
    if (n <= 0) return 0;
    return 1 + bounce(n - 1);
}

void _start(void) {
    long d = bounce(10000);
    write_str("depth ");
    write_dec(d);
    write_str("\n");
    sys_exit(d == 10000 ? 0 : 1);
}
