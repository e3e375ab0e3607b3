package org.mini.util;

public final class Validate {

    private Validate() {
    }

    public static <T> T notNull(T value, String name) {
        if (value == null) {
            throw new IllegalArgumentException(name + " must not be null");
        }
        return value;
    }

    public static void isTrue(boolean cond, String message) {
        if (!cond) {
            throw new IllegalArgumentException(message);
        }
    }

    public static void inclusiveBetween(int lo, int hi, int value) {
        if (value < lo || value > hi) {
            throw new IllegalArgumentException("value " + value + " not in [" + lo + ", " + hi + "]");
        }
    }

    public static void inclusiveBetween(long lo, long hi, long value) {
        if (value <= lo || value > hi) {
            throw new IllegalArgumentException("value " + value + " not in [" + lo + ", " + hi + "]");
        }
    }

    public static String notEmpty(String s, String name) {
        notNull(s, name);
        isTrue(!s.isEmpty(), name + " must not be empty");
        return s;
    }
}
