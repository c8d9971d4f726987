/* Indirect calls through a data-held table plus deep recursion. */
#include "nolibc.h"

typedef long (*op_fn)(long, long);
static long add_vals(long a, long b) { return a + b; }
static long mul_vals(long a, long b) { return a * b; }
static long sub_vals(long a, long b) { return a - b; }

static volatile op_fn ops[3] = { add_vals, mul_vals, sub_vals };
static volatile int idx0 = 0, idx1 = 1, idx2 = 2;

static long depth_sum(long n) {
    if (n == 0) return 0;
    return n + depth_sum(n - 1);
}

void _start(void) {
    long a = ops[idx0](7, 5);
    long b = ops[idx1](a, 3);
    long c = ops[idx2](b, 6);
    long d = depth_sum(10000);
    write_str("val ");
    write_dec(c * 1000000 + (d % 1000000));
    write_str("\n");
    sys_exit(c == 30 && d == 50005000 ? 0 : 1);
}
