/* Dynamically linked: the C runtime enters main through its original
 * address, exercising fault redirection before a line is printed. */
#include <stdio.h>

int main(int argc, char **argv) {
    (void)argv;
    printf("hello from libc with %d args\n", argc);
    return 42;
}
