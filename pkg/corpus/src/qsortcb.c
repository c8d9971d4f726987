/* An uninstrumented library repeatedly calls back into rewritten code
 * through an original function pointer. */
#include <stdio.h>
#include <stdlib.h>

static int cmp_longs(const void *a, const void *b) {
    long x = *(const long *)a, y = *(const long *)b;
    return (x > y) - (x < y);
}

int main(void) {
    long vals[] = {9, 2, 7, 1, 8, 3, 6, 4, 5, 0};
    qsort(vals, 10, sizeof vals[0], cmp_longs);
    for (int i = 0; i < 10; i++)
        printf("%ld", vals[i]);
    printf("\n");
    return 0;
}
