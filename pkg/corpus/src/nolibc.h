/* Minimal raw-syscall helpers for freestanding corpus programs. */
#ifndef NOLIBC_H
#define NOLIBC_H

static long sys_write(long fd, const void *buf, long n) {
    long ret;
    __asm__ volatile ("syscall" : "=a"(ret)
                      : "a"(1), "D"(fd), "S"(buf), "d"(n)
                      : "rcx", "r11", "memory");
    return ret;
}

static __attribute__((noreturn)) void sys_exit(long code) {
    __asm__ volatile ("syscall" :: "a"(60), "D"(code) : "rcx", "r11");
    __builtin_unreachable();
}

static void write_dec(long v) {
    char buf[24];
    int i = 24;
    unsigned long u = v < 0 ? -(unsigned long)v : (unsigned long)v;
    do { buf[--i] = '0' + (u % 10); u /= 10; } while (u);
    if (v < 0) buf[--i] = '-';
    sys_write(1, buf + i, 24 - i);
}

static void write_str(const char *s) {
    long n = 0;
    while (s[n]) n++;
    sys_write(1, s, n);
}

#endif
