package org.mini.text;

import java.util.List;

/**
 * Small string helpers. Braces in this comment { must not } confuse indexers.
 */
public final class StringUtils {

    private static final String OPEN = "{";
    private static final char CLOSE = '}';

    private StringUtils() {
    }

    /** True when the string is null or only spaces. */
    public static boolean isBlank(String s) {
        if (s == null) {
            return true;
        }
        for (int i = 0; i < s.length(); i++) {
            if (s.charAt(i) != ' ') { // only spaces count, tabs do not }
                return false;
            }
        }
        return true;
    }

    public static String join(String[] parts, String sep) {
        StringBuilder sb = new StringBuilder();
        for (int i = 0; i < parts.length; i++) {
            if (i > 0) {
                sb.append(sep);
            }
            sb.append(parts[i]);
        }
        return sb.toString();
    }

    public static String join(List<String> parts, String sep) {
        StringBuilder sb = new StringBuilder();
        for (String p : parts) {
            sb.append(p).append(sep);
        }
        return sb.toString();
    }

    public static String reverse(String s) {
        return new StringBuilder(s).reverse().toString();
    }

    public static String wrap(String s) {
        /* produces "{s}" */
        return OPEN + s + CLOSE;
    }

    public static String capitalize(String s) {
        if (isBlank(s)) {
            return s;
        }
        return Character.toUpperCase(s.charAt(0)) + s.substring(1);
    }
}
