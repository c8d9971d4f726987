#include <stdio.h>
#include <string.h>
#include <stdlib.h>

int cmp(const void *a, const void *b) { return *(const int*)a - *(const int*)b; }

int main(void) {
    int v[64];
    for (int i = 0; i < 64; i++) v[i] = (i * 37) % 64;
    qsort(v, 64, sizeof v[0], cmp);
    char buf[256];
    snprintf(buf, sizeof buf, "sorted %d %d %d len %zu", v[0], v[32], v[63], strlen("x"));
    puts(buf);
    return v[0] == 0 && v[63] == 63 ? 5 : 1;
}
