/* Dense switch compiled to a jump table: the indirect jump carries the
 * no-track prefix and its targets have no landing pads. */
#include <stdio.h>

__attribute__((noinline)) static long classify(int c, long v) {
    switch (c) {
    case 0: return v + 1;
    case 1: return v * 2;
    case 2: return v - 3;
    case 3: return v / 2;
    case 4: return v % 7;
    case 5: return v ^ 0x55;
    case 6: return v << 1;
    case 7: return v >> 1;
    case 8: return -v;
    case 9: return ~v;
    default: return v;
    }
}

int main(void) {
    volatile long acc = 100;
    long r = acc;
    for (int i = 0; i < 10; i++)
        r = classify(i, r);
    printf("result %ld\n", r);
    return (int)(r & 63);
}
