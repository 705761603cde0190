int count_vowels(const unsigned char *s, unsigned long n) {
    int count = 0;
    for (unsigned long i = 0; i < n; i++) {
        unsigned char c = s[i] | 0x20;
        if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u')
            count++;
    }
    return count;
}
